#include "augsearch/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace augsearch {

using nlohmann::json;

void MagnitudeGrid::validate() const {
  if (!(lo <= hi)) throw std::invalid_argument("MagnitudeGrid: lo must be <= hi");
  if (n_levels < 2) throw std::invalid_argument("MagnitudeGrid: n_levels must be >= 2");
}

double MagnitudeGrid::value(int level) const {
  if (level < 0 || level >= n_levels)
    throw std::invalid_argument("grid level " + std::to_string(level) + " outside [0, " +
                                std::to_string(n_levels) + ")");
  if (level == n_levels - 1) return hi;
  return lo + level * (hi - lo) / (n_levels - 1);
}

int MagnitudeGrid::nearest_level(double v) const {
  if (hi == lo) return 0;
  const double k = std::round((v - lo) / (hi - lo) * (n_levels - 1));
  return static_cast<int>(std::clamp(k, 0.0, static_cast<double>(n_levels - 1)));
}

std::vector<double> MagnitudeGrid::values() const {
  std::vector<double> out(static_cast<std::size_t>(n_levels));
  for (int k = 0; k < n_levels; ++k) out[static_cast<std::size_t>(k)] = value(k);
  return out;
}

double grid_value(const MagnitudeGrid& grid, int level) { return grid.value(level); }

namespace {

constexpr std::array<std::string_view, kNumOps> kOpNames{
    "Scale", "RotationX", "RotationY", "RotationZ", "Alpha", "Sigma", "Gamma"};
constexpr std::array<std::string_view, kNumGroups> kGroupNames{"scale", "rot", "eldef", "gamma"};

}  // namespace

std::string_view to_string(Op op) { return kOpNames[static_cast<std::size_t>(op)]; }
std::string_view to_string(ProbGroup g) { return kGroupNames[static_cast<std::size_t>(g)]; }

Op op_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kNumOps; ++i)
    if (kOpNames[i] == name) return static_cast<Op>(i);
  throw std::invalid_argument("unknown operation '" + std::string(name) + "'");
}

ProbGroup group_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kNumGroups; ++i)
    if (kGroupNames[i] == name) return static_cast<ProbGroup>(i);
  throw std::invalid_argument("unknown probability group '" + std::string(name) + "'");
}

ProbGroup group_of(Op op) {
  switch (op) {
    case Op::Scale: return ProbGroup::Scale;
    case Op::RotationX:
    case Op::RotationY:
    case Op::RotationZ: return ProbGroup::Rot;
    case Op::Alpha:
    case Op::Sigma: return ProbGroup::ElDef;
    case Op::Gamma: return ProbGroup::Gamma;
  }
  throw std::invalid_argument("bad op");
}

ConcretePolicy ConcretePolicy::identity() {
  ConcretePolicy p;
  p.intervals[static_cast<std::size_t>(Op::Scale)] = {1.0, 1.0};
  p.intervals[static_cast<std::size_t>(Op::Gamma)] = {1.0, 1.0};
  return p;
}

SearchSpace::SearchSpace(std::vector<OperationDef> ops, MagnitudeGrid prob_grid,
                         std::vector<std::vector<Op>> ties)
    : ops_(std::move(ops)), prob_grid_(prob_grid), ties_(std::move(ties)) {
  if (ops_.size() != kNumOps)
    throw std::invalid_argument("search space needs exactly 7 operations");
  std::array<bool, kNumOps> seen{};
  for (std::size_t i = 0; i < ops_.size(); ++i) {
    const auto& def = ops_[i];
    const auto o = static_cast<std::size_t>(def.op);
    if (seen[o]) throw std::invalid_argument("duplicate operation " + std::string(to_string(def.op)));
    seen[o] = true;
    op_index_[o] = i;
    def.lb_grid.validate();
    def.rb_grid.validate();
    if (def.lb_grid.hi > def.rb_grid.lo)
      throw std::invalid_argument("operation " + std::string(to_string(def.op)) +
                                  ": LB range must lie below RB range");
    if (def.prob_group != group_of(def.op))
      throw std::invalid_argument("operation " + std::string(to_string(def.op)) +
                                  " has the wrong probability group");
  }
  prob_grid_.validate();
  if (prob_grid_.lo < 0.0 || prob_grid_.hi > 1.0)
    throw std::invalid_argument("probability grid must lie inside [0, 1]");

  // leader[o] = position (in ops_ order) of the op whose variable o shares.
  std::array<std::size_t, kNumOps> leader{};
  for (std::size_t i = 0; i < kNumOps; ++i) leader[static_cast<std::size_t>(ops_[i].op)] = i;
  std::array<bool, kNumOps> tied{};
  for (const auto& tie : ties_) {
    if (tie.size() < 2) throw std::invalid_argument("a tie needs at least two operations");
    std::size_t first = kNumOps;
    for (Op o : tie) first = std::min(first, op_index_[static_cast<std::size_t>(o)]);
    const auto& ref = ops_[first];
    for (Op o : tie) {
      const auto oi = static_cast<std::size_t>(o);
      if (tied[oi]) throw std::invalid_argument("operation tied twice");
      tied[oi] = true;
      const auto& def = ops_[op_index_[oi]];
      if (!(def.lb_grid == ref.lb_grid) || !(def.rb_grid == ref.rb_grid))
        throw std::invalid_argument("tied operations must share identical grids");
      leader[oi] = first;
    }
  }

  auto add_bound_vars = [&](VariableKind kind, std::array<std::size_t, kNumOps>& var_of) {
    std::array<std::size_t, kNumOps> var_at_pos{};
    for (std::size_t i = 0; i < kNumOps; ++i) {
      const auto o = static_cast<std::size_t>(ops_[i].op);
      if (leader[o] != i) continue;
      VariableDesc v;
      v.kind = kind;
      const auto& grid = kind == VariableKind::LowerBound ? ops_[i].lb_grid : ops_[i].rb_grid;
      v.n_categories = grid.n_levels;
      v.name = std::string(to_string(ops_[i].op)) + (kind == VariableKind::LowerBound ? ".lb" : ".rb");
      var_at_pos[i] = variables_.size();
      variables_.push_back(std::move(v));
    }
    for (std::size_t i = 0; i < kNumOps; ++i) {
      const auto o = static_cast<std::size_t>(ops_[i].op);
      var_of[o] = var_at_pos[leader[o]];
      variables_[var_of[o]].owners.push_back(static_cast<int>(o));
    }
  };
  add_bound_vars(VariableKind::LowerBound, lb_var_);
  add_bound_vars(VariableKind::UpperBound, rb_var_);
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    VariableDesc v;
    v.kind = VariableKind::Probability;
    v.owners = {static_cast<int>(g)};
    v.n_categories = prob_grid_.n_levels;
    v.name = "p_" + std::string(kGroupNames[g]);
    prob_var_[g] = variables_.size();
    variables_.push_back(std::move(v));
  }
}

const OperationDef& SearchSpace::op(Op o) const { return ops_[op_index_[static_cast<std::size_t>(o)]]; }

ConcretePolicy SearchSpace::decode(const PolicyAssignment& assignment) const {
  if (assignment.levels.size() != variables_.size())
    throw std::invalid_argument("assignment has " + std::to_string(assignment.levels.size()) +
                                " levels, space has " + std::to_string(variables_.size()) +
                                " variables");
  ConcretePolicy out;
  for (const auto& def : ops_) {
    const auto o = static_cast<std::size_t>(def.op);
    out.intervals[o].lb = def.lb_grid.value(assignment.levels[lb_var_[o]]);
    out.intervals[o].rb = def.rb_grid.value(assignment.levels[rb_var_[o]]);
  }
  for (std::size_t g = 0; g < kNumGroups; ++g)
    out.probs[g] = prob_grid_.value(assignment.levels[prob_var_[g]]);
  return out;
}

PolicyAssignment SearchSpace::encode(const ConcretePolicy& policy) const {
  PolicyAssignment a;
  a.levels.assign(variables_.size(), 0);
  for (const auto& def : ops_) {
    const auto o = static_cast<std::size_t>(def.op);
    a.levels[lb_var_[o]] = def.lb_grid.nearest_level(policy.intervals[o].lb);
    a.levels[rb_var_[o]] = def.rb_grid.nearest_level(policy.intervals[o].rb);
  }
  for (std::size_t g = 0; g < kNumGroups; ++g)
    a.levels[prob_var_[g]] = prob_grid_.nearest_level(policy.probs[g]);
  return a;
}

namespace {

json grid_to_json(const MagnitudeGrid& g) {
  return json{{"lo", g.lo}, {"hi", g.hi}, {"n_levels", g.n_levels}};
}

MagnitudeGrid grid_from_json(const json& j) {
  MagnitudeGrid g;
  g.lo = j.at("lo").get<double>();
  g.hi = j.at("hi").get<double>();
  g.n_levels = j.value("n_levels", 11);
  return g;
}

}  // namespace

std::string SearchSpace::to_json() const {
  json j;
  j["ops"] = json::array();
  for (const auto& def : ops_) {
    j["ops"].push_back({{"name", to_string(def.op)},
                        {"lb", grid_to_json(def.lb_grid)},
                        {"rb", grid_to_json(def.rb_grid)},
                        {"prob_group", to_string(def.prob_group)}});
  }
  j["prob_grid"] = grid_to_json(prob_grid_);
  j["ties"] = json::array();
  for (const auto& tie : ties_) {
    json t = json::array();
    for (Op o : tie) t.push_back(to_string(o));
    j["ties"].push_back(t);
  }
  return j.dump(2);
}

SearchSpace SearchSpace::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("search space JSON: ") + e.what());
  }
  try {
    std::vector<OperationDef> ops;
    for (const auto& o : j.at("ops")) {
      OperationDef def;
      def.op = op_from_string(o.at("name").get<std::string>());
      def.lb_grid = grid_from_json(o.at("lb"));
      def.rb_grid = grid_from_json(o.at("rb"));
      def.prob_group = o.contains("prob_group")
                           ? group_from_string(o.at("prob_group").get<std::string>())
                           : group_of(def.op);
      ops.push_back(def);
    }
    MagnitudeGrid prob = j.contains("prob_grid") ? grid_from_json(j.at("prob_grid"))
                                                 : MagnitudeGrid{0.0, 1.0, 11};
    std::vector<std::vector<Op>> ties;
    if (j.contains("ties")) {
      for (const auto& t : j.at("ties")) {
        std::vector<Op> tie;
        for (const auto& name : t) tie.push_back(op_from_string(name.get<std::string>()));
        ties.push_back(std::move(tie));
      }
    }
    return SearchSpace(std::move(ops), prob, std::move(ties));
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("search space JSON: ") + e.what());
  }
}

SearchSpace build_default_space(bool tie_rotation_axes) {
  constexpr double kPi6 = std::numbers::pi / 6.0;
  const auto op = [](Op o, double lb_lo, double lb_hi, double rb_lo, double rb_hi) {
    return OperationDef{o, {lb_lo, lb_hi, 11}, {rb_lo, rb_hi, 11}, group_of(o)};
  };
  std::vector<OperationDef> ops{
      op(Op::Scale, 0.5, 1.0, 1.0, 1.5),
      op(Op::RotationX, -kPi6, 0.0, 0.0, kPi6),
      op(Op::RotationY, -kPi6, 0.0, 0.0, kPi6),
      op(Op::RotationZ, -kPi6, 0.0, 0.0, kPi6),
      op(Op::Alpha, 0.0, 450.0, 450.0, 900.0),
      op(Op::Sigma, 0.0, 7.0, 7.0, 14.0),
      op(Op::Gamma, 0.5, 1.0, 1.0, 1.5),
  };
  std::vector<std::vector<Op>> ties;
  if (tie_rotation_axes) ties.push_back({Op::RotationX, Op::RotationY, Op::RotationZ});
  return SearchSpace(std::move(ops), MagnitudeGrid{0.0, 1.0, 11}, std::move(ties));
}

ConcretePolicy decode(const SearchSpace& space, const PolicyAssignment& assignment) {
  return space.decode(assignment);
}

PolicyAssignment default_policy_assignment(const SearchSpace& space) {
  constexpr double kPi6 = std::numbers::pi / 6.0;
  ConcretePolicy p;
  auto set = [&](Op o, double lb, double rb) { p.intervals[static_cast<std::size_t>(o)] = {lb, rb}; };
  set(Op::Scale, 0.85, 1.25);
  set(Op::RotationX, -kPi6, kPi6);
  set(Op::RotationY, -kPi6, kPi6);
  set(Op::RotationZ, -kPi6, kPi6);
  set(Op::Alpha, 0.0, 900.0);
  set(Op::Sigma, 9.0, 13.0);
  set(Op::Gamma, 0.7, 1.5);
  p.probs = {0.2, 0.2, 0.2, 0.3};
  return space.encode(p);
}

}  // namespace augsearch
