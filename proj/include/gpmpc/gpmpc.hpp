#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gpmpc/fpsqp.hpp"
#include "gpmpc/local_linearization.hpp"
#include "gpmpc/qp_active_set.hpp"

namespace gpmpc {

/// How the chance constraint p{x ≥ x_min} ≥ 0.95 is turned into a bound on μ.
/// PaperVariance uses μ ± 2·Σ_dd literally; TwoStd uses μ ± 2·√Σ_dd.
enum class TighteningMode { PaperVariance, TwoStd };

std::string tightening_name(TighteningMode mode);
TighteningMode parse_tightening(const std::string& name);

struct MpcConfig {
  int horizon = 10;
  Matrix q_mat;
  Matrix r_mat;
  Vector u_min, u_max;
  Vector x_min, x_max;  // ±infinity disables a side
  double confidence = 0.95;
  TighteningMode tightening = TighteningMode::PaperVariance;

  // GPMPC1 (trust-region SQP)
  int sqp_max_iterations = 50;
  double sqp_tolerance = 1e-6;
  double sqp_radius_max = 10.0;
  bool sqp_gauss_newton_start = true;  // initial Hessian 2ΣSᵀQS + 2R instead of a scaled identity

  void validate(int n, int m) const;
};

struct ReferenceTrajectory {
  std::vector<Vector> points;  // full state-dimension references, index k
};

/// Σ_i ‖μ_i − r_i‖²_Q + ‖u_i‖²_R + tr(QΣ_i).
double expected_cost(const std::vector<Vector>& means, const std::vector<Matrix>& covs,
                     const std::vector<Vector>& controls, const std::vector<Vector>& refs,
                     const MpcConfig& cfg);
double stage_cost(const Vector& mean, const Matrix& cov, const Vector& control, const Vector& ref,
                  const MpcConfig& cfg);

struct StateBounds {
  Vector lower;
  Vector upper;
};

/// Bounds on μ implied by the relaxed chance constraints. Throws
/// InfeasibleError naming the state dimension (and `step` if given) when
/// the tightened interval is empty.
StateBounds tighten_constraints(const Vector& x_min, const Vector& x_max, const Matrix& cov,
                                const MpcConfig& cfg, int step = -1);

/// Condensed GPMPC2 problem over ΔU = (Δu_k, ..., Δu_{k+H−1}):
///   J(ΔU) = ½ΔUᵀΦΔU + ψᵀΔU + C,   G ΔU ≤ rhs.
/// States follow the velocity form Δs_{k+i} = AΔs_{k+i−1} + BΔu_{k+i−1},
/// stacked as Z = 1⊗s_k + T_z(ÃΔs_k + B̃ΔU), and controls U = 1⊗u_{k−1} + T_uΔU.
struct CondensedQp {
  Matrix phi;
  Vector psi;
  double const_c = 0.0;
  Matrix g_mat;
  Vector g_rhs;

  Matrix t_u, t_z, a_tilde, b_tilde;
  Matrix q_tilde;  // diag{Q, diag(vec Q)} per step
  Matrix r_tilde;
  Matrix g_z;     // T_z B̃
  Vector z_nominal;  // Z at ΔU = 0
  Vector u_nominal;  // U at ΔU = 0
  Vector ref_stack;  // r* = (r_{k+1}, 0, ..., r_{k+H}, 0)
  Vector s_k, ds_k, u_prev;
  int n = 0, m = 0, horizon = 0;

  Vector states(const Vector& du) const { return z_nominal + g_z * du; }
  Vector controls(const Vector& du) const { return u_nominal + t_u * du; }
  double objective(const Vector& du) const { return 0.5 * du.dot(phi * du) + psi.dot(du) + const_c; }
  QpProblem qp() const { return QpProblem{phi, psi, g_mat, g_rhs}; }
};

CondensedQp build_condensed_qp(const ExtendedLocalModel& ext, const Vector& s_k, const Vector& ds_k,
                               const Vector& u_prev, const std::vector<Vector>& refs,
                               const MpcConfig& cfg);

/// Horizon prediction at the solver's solution.
struct StepDiagnostics {
  std::vector<Vector> means;     // μ_{k+1..k+H}
  std::vector<Matrix> covs;      // Σ_{k+1..k+H}
  std::vector<Vector> controls;  // u_k..u_{k+H−1}
  std::vector<StateBounds> bounds;  // tightened bounds the solver enforced on each μ
  double objective = 0.0;
  int iterations = 0;
  int qp_iterations = 0;
  bool converged = true;
};

struct Gpmpc1Result {
  Vector u;
  Vector sequence;  // optimal U (H·m)
  StepDiagnostics diag;
};

/// GPMPC1: single shooting over U with moment-matched rollouts, solved by
/// the trust-region SQP. `warm` (H·m) seeds the start if it is feasible.
Gpmpc1Result gpmpc1_step(const GpModel& model, const GaussianState& state, const Vector& u_prev,
                         const std::vector<Vector>& refs, const MpcConfig& cfg,
                         const Vector* warm = nullptr);

struct Gpmpc2Memory {
  bool valid = false;
  Vector prev_state;  // extended state of the previous step
  Vector prev_du;     // previous optimal ΔU
  WorkingSet ws;
};

struct Gpmpc2Result {
  Vector u;
  Vector du;
  WorkingSet ws;
  Vector extended_state;
  StepDiagnostics diag;
};

/// GPMPC2: one extended linearization at (s_k, u_{k−1}), condensed QP,
/// active-set solve warm-started from `memory`.
Gpmpc2Result gpmpc2_step(const GpModel& model, const GaussianState& state, const Vector& u_prev,
                         const std::vector<Vector>& refs, const MpcConfig& cfg,
                         const Gpmpc2Memory* memory = nullptr);

enum class ControllerKind { Gpmpc1, Gpmpc2 };
std::string controller_name(ControllerKind kind);
ControllerKind parse_controller(const std::string& name);

struct ControlStep {
  Vector u;
  StepDiagnostics diag;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual ControlStep compute(const GaussianState& state, const Vector& u_prev,
                              const std::vector<Vector>& refs) = 0;
  virtual void reset() = 0;
  virtual ControllerKind kind() const = 0;
};

std::unique_ptr<Controller> make_controller(ControllerKind kind, const GpModel& model,
                                            const MpcConfig& cfg);

class Plant {
 public:
  virtual ~Plant() = default;
  virtual Vector state() const = 0;
  /// Applies u, advances one sample and returns the measured output.
  virtual Vector step(const Vector& u) = 0;
};

struct LogRow {
  int k = 0;
  Vector reference;  // r_{k+1}
  Vector control;    // u_k
  Vector state;      // x_{k+1}
  Vector output;     // y_{k+1}
  Vector pred_mean;  // μ_{k+1|k}
  Vector pred_var;   // diag Σ_{k+1|k}
  double cost = 0.0;
  double lyapunov = 0.0;
  int solver_iters = 0;
  double solve_ms = 0.0;
};

struct TrajectoryLog {
  std::vector<LogRow> rows;
  std::vector<StepDiagnostics> horizons;
  std::vector<std::vector<Vector>> horizon_refs;
  bool failed = false;
  std::string error;
};

struct RunOptions {
  bool record_solve_time = true;  // false writes 0 so logs are byte-reproducible
};

/// Closed loop for `steps` samples starting from the plant's current state
/// and u_{−1} = u_init. Each step the controller sees μ = measured state and
/// Σ = diag of the GP one-step variance at (x_k, u_{k−1}). A controller
/// failure stops the loop; the log keeps the completed steps.
TrajectoryLog run_receding_horizon(Controller& controller, Plant& plant, const GpModel& model,
                                   const ReferenceTrajectory& ref, int steps, const MpcConfig& cfg,
                                   const Vector& u_init, const RunOptions& options = {});

/// k,r_1..r_n,u_1..u_m,x_1..x_n,y_1..y_p,pred_mu_1..n,pred_var_1..n,cost,lyapunov,solver_iters,solve_ms
std::string trajectory_csv(const TrajectoryLog& log);

struct LyapunovReport {
  std::vector<double> values;  // V*(k)
  std::vector<double> terminal;  // last stage term of each horizon
  std::vector<bool> violations;  // entry k compares V*(k) with V*(k−1); entry 0 is false
};

/// V*(k) from the logged horizons; flags V*(k+1) > V*(k) + terminal(k+1) + tol·(1 + V*(k)).
LyapunovReport lyapunov_diagnostic(const TrajectoryLog& log, const MpcConfig& cfg, double tol = 1e-9);

}  // namespace gpmpc
