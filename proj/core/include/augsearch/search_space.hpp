#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace augsearch {

/// Uniformly spaced discretization of a closed magnitude range.
/// Level k maps to lo + k*(hi-lo)/(n_levels-1); both endpoints are exact.
struct MagnitudeGrid {
  double lo = 0.0;
  double hi = 1.0;
  int n_levels = 11;

  /// Throws std::invalid_argument unless lo <= hi and n_levels >= 2.
  void validate() const;

  /// Throws std::invalid_argument for a level outside [0, n_levels).
  double value(int level) const;

  /// Level whose value is closest to v (clamped into the grid).
  int nearest_level(double v) const;

  std::vector<double> values() const;

  friend bool operator==(const MagnitudeGrid&, const MagnitudeGrid&) = default;
};

double grid_value(const MagnitudeGrid& grid, int level);

enum class Op : int { Scale = 0, RotationX, RotationY, RotationZ, Alpha, Sigma, Gamma };
inline constexpr std::size_t kNumOps = 7;

enum class ProbGroup : int { Scale = 0, Rot, ElDef, Gamma };
inline constexpr std::size_t kNumGroups = 4;

std::string_view to_string(Op op);
std::string_view to_string(ProbGroup g);
Op op_from_string(std::string_view name);
ProbGroup group_from_string(std::string_view name);

/// The fixed operation -> probability group mapping.
ProbGroup group_of(Op op);

struct OperationDef {
  Op op = Op::Scale;
  MagnitudeGrid lb_grid;
  MagnitudeGrid rb_grid;
  ProbGroup prob_group = ProbGroup::Scale;
};

enum class VariableKind { LowerBound, UpperBound, Probability };

/// One categorical search variable. `owners` lists the ops (for LB/RB) or the
/// single group (for Probability) whose value this variable controls; tied
/// operations share one variable.
struct VariableDesc {
  VariableKind kind = VariableKind::LowerBound;
  std::vector<int> owners;
  int n_categories = 11;
  std::string name;
};

/// Category index per variable, in SearchSpace::variables() order.
struct PolicyAssignment {
  std::vector<int> levels;
  friend bool operator==(const PolicyAssignment&, const PolicyAssignment&) = default;
};

struct Interval {
  double lb = 0.0;
  double rb = 0.0;
};

/// A decoded augmentation strategy: magnitude interval per op and
/// application probability per group.
struct ConcretePolicy {
  std::array<Interval, kNumOps> intervals{};
  std::array<double, kNumGroups> probs{};

  const Interval& interval(Op op) const { return intervals[static_cast<std::size_t>(op)]; }
  double prob(ProbGroup g) const { return probs[static_cast<std::size_t>(g)]; }

  /// All probabilities zero: applying the policy never changes anything.
  static ConcretePolicy identity();
};

/// Categorical augmentation search space.
///
/// Variable order: lower bounds in op order, then upper bounds in op order,
/// then probabilities in group order (scale, rot, eldef, gamma). Tied ops
/// (e.g. the three rotation axes) share their LB and RB variables; the
/// shared variable sits at the position of the first op in the tie.
class SearchSpace {
 public:
  /// ops must contain each of the 7 operations exactly once. Each tie is a
  /// list of ops whose LB and RB grids must match.
  SearchSpace(std::vector<OperationDef> ops, MagnitudeGrid prob_grid,
              std::vector<std::vector<Op>> ties = {});

  const std::vector<OperationDef>& ops() const { return ops_; }
  const OperationDef& op(Op o) const;
  const MagnitudeGrid& prob_grid() const { return prob_grid_; }
  const std::vector<VariableDesc>& variables() const { return variables_; }
  const std::vector<std::vector<Op>>& ties() const { return ties_; }
  std::size_t num_variables() const { return variables_.size(); }

  /// Variable indices controlling a given op bound / group probability.
  std::size_t lb_variable(Op o) const { return lb_var_[static_cast<std::size_t>(o)]; }
  std::size_t rb_variable(Op o) const { return rb_var_[static_cast<std::size_t>(o)]; }
  std::size_t prob_variable(ProbGroup g) const { return prob_var_[static_cast<std::size_t>(g)]; }

  /// Throws std::invalid_argument on length mismatch or out-of-range levels.
  ConcretePolicy decode(const PolicyAssignment& assignment) const;

  /// Nearest-level encoding of a concrete policy.
  PolicyAssignment encode(const ConcretePolicy& policy) const;

  std::string to_json() const;
  static SearchSpace from_json(std::string_view text);

 private:
  std::vector<OperationDef> ops_;
  MagnitudeGrid prob_grid_;
  std::vector<std::vector<Op>> ties_;
  std::vector<VariableDesc> variables_;
  std::array<std::size_t, kNumOps> op_index_{};
  std::array<std::size_t, kNumOps> lb_var_{};
  std::array<std::size_t, kNumOps> rb_var_{};
  std::array<std::size_t, kNumGroups> prob_var_{};
};

/// Table of searched ranges: 7 ops x {LB, RB} + 4 probabilities, 11 levels
/// each. With tie_rotation_axes the X/Y/Z rotations share bounds (14 vars).
SearchSpace build_default_space(bool tie_rotation_axes = false);

ConcretePolicy decode(const SearchSpace& space, const PolicyAssignment& assignment);

/// nnU-Net-like hand-tuned policy snapped to the nearest grid levels; used by
/// the default_policy baseline.
PolicyAssignment default_policy_assignment(const SearchSpace& space);

}  // namespace augsearch
