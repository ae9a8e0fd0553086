#include "dcp/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

void StopPolicy::validate() const {
  switch (kind) {
    case StopKind::Budget:
      if (kappa < 1) {
        throw ConfigError("budget stopping needs kappa >= 1");
      }
      break;
    case StopKind::Condition2:
      if (!(eta_min > 0.0 && eta_min < 1.0)) {
        throw ConfigError("condition2 needs eta_min in (0, 1)");
      }
      [[fallthrough]];
    case StopKind::Condition1:
      if (!(epsilon >= 0.0)) {
        throw ConfigError("epsilon must be non-negative");
      }
      break;
  }
}

const char* stop_kind_name(StopKind kind) {
  switch (kind) {
    case StopKind::Budget:
      return "budget";
    case StopKind::Condition1:
      return "condition1";
    case StopKind::Condition2:
      return "condition2";
  }
  return "?";
}

StopKind parse_stop_kind(const std::string& name) {
  if (name == "budget") return StopKind::Budget;
  if (name == "condition1") return StopKind::Condition1;
  if (name == "condition2") return StopKind::Condition2;
  throw ConfigError("unknown stopping rule '" + name + "'");
}

std::size_t condition2_cap(const StopPolicy& policy, std::size_t groups) {
  return ceil_fraction(1.0 - policy.eta_min, groups);
}

StopCheck check_stop(const SelectionState& state, const StopPolicy& policy, std::size_t groups) {
  const std::size_t count = state.selected.size();
  if (policy.kind == StopKind::Budget) {
    if (count >= policy.kappa) {
      return {true, "budget"};
    }
    return {};
  }
  const auto& h = state.loss_history;
  if (h.size() < 2) {
    throw ContractError("stopping conditions need at least two recorded losses");
  }
  if (h.front() == 0.0) {
    throw ContractError("L(W^0) is zero; the relative loss decrease is undefined");
  }
  const double rel = std::abs(h[h.size() - 2] - h.back()) / h.front();
  if (rel <= policy.epsilon) {
    return {true, "condition1"};
  }
  if (policy.kind == StopKind::Condition2 && count > condition2_cap(policy, groups)) {
    return {true, "condition2_cap"};
  }
  return {};
}

std::vector<double> channel_grad_norms(const Tensor& grad) {
  const std::size_t n = grad.dim(0), c = grad.dim(1), area = grad.plane_size();
  std::vector<double> sq(c, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      const double* g = grad.raw() + (j * c + k) * area;
      for (std::size_t q = 0; q < area; ++q) {
        sq[k] += g[q] * g[q];
      }
    }
  }
  for (double& v : sq) {
    v = std::sqrt(v);
  }
  return sq;
}

std::vector<double> kernel_grad_norms(const Tensor& grad) {
  const std::size_t kernels = grad.dim(0) * grad.dim(1), area = grad.plane_size();
  std::vector<double> out(kernels, 0.0);
  for (std::size_t i = 0; i < kernels; ++i) {
    const double* g = grad.raw() + i * area;
    double s = 0.0;
    for (std::size_t q = 0; q < area; ++q) {
      s += g[q] * g[q];
    }
    out[i] = std::sqrt(s);
  }
  return out;
}

std::vector<double> channel_grad_norms(const LayerObjective& objective, const Tensor& w) {
  return channel_grad_norms(objective.evaluate(w, true).grad);
}

std::vector<double> kernel_grad_norms(const LayerObjective& objective, const Tensor& w) {
  return kernel_grad_norms(objective.evaluate(w, true).grad);
}

std::vector<std::size_t> pick_top_B(std::span<const double> norms,
                                    std::span<const std::size_t> excluded, std::size_t B) {
  std::vector<std::uint8_t> skip(norms.size(), 0);
  for (std::size_t e : excluded) {
    if (e < skip.size()) {
      skip[e] = 1;
    }
  }
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (!skip[i]) {
      cand.push_back(i);
    }
  }
  if (cand.empty()) {
    throw ContractError("pick_top_B: every group is already selected");
  }
  if (B == 0) {
    throw ConfigError("B must be at least 1");
  }
  const std::size_t take = std::min(B, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + take, cand.end(),
                    [&](std::size_t a, std::size_t b) {
                      return norms[a] > norms[b] || (norms[a] == norms[b] && a < b);
                    });
  cand.resize(take);
  return cand;
}

namespace {

// Loss rise, relative to the previous iterate or L(W^0), treated as divergence.
constexpr double kDivergenceFactor = 1e3;

std::size_t group_count(const Tensor& w, Granularity g) {
  return g == Granularity::Channel ? w.dim(1) : w.dim(0) * w.dim(1);
}

// Per-kernel (j, k) flag built from group flags.
std::vector<std::uint8_t> kernel_flags(const Tensor& w, std::span<const std::uint8_t> groups,
                                       Granularity g) {
  const std::size_t n = w.dim(0), c = w.dim(1);
  if (g == Granularity::Kernel) {
    return {groups.begin(), groups.end()};
  }
  std::vector<std::uint8_t> out(n * c);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      out[j * c + k] = groups[k];
    }
  }
  return out;
}

void zero_inactive(Tensor& t, std::span<const std::uint8_t> kernels) {
  const std::size_t area = t.plane_size();
  for (std::size_t q = 0; q < kernels.size(); ++q) {
    if (!kernels[q]) {
      std::fill_n(t.raw() + q * area, area, 0.0);
    }
  }
}

}  // namespace

Tensor solve_subproblem(const LayerObjective& objective, Tensor w,
                        std::span<const std::uint8_t> active, Granularity granularity,
                        const SubproblemConfig& config, std::uint64_t seed) {
  if (active.size() != group_count(w, granularity)) {
    throw DimensionError("subproblem activity flags do not match the weight groups");
  }
  if (!(config.gamma > 0.0)) {
    throw ConfigError("subproblem learning rate must be positive");
  }
  if (config.epochs == 0 ||
      std::none_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; })) {
    return w;
  }
  const std::vector<std::uint8_t> kernels = kernel_flags(w, active, granularity);
  const std::size_t batch = std::max<std::size_t>(config.batch, 1);
  std::vector<std::size_t> order(objective.samples());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t count = std::min(batch, order.size() - begin);
      LayerObjective::Result r;
      try {
        r = objective.evaluate(w, std::span<const std::size_t>(order).subspan(begin, count), true);
      } catch (const NumericError&) {
        throw NumericError("subproblem diverged at layer " + std::to_string(objective.layer()) +
                           "; try a smaller learning rate than " + std::to_string(config.gamma));
      }
      zero_inactive(r.grad, kernels);
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= config.gamma * r.grad[i];
      }
    }
  }
  if (!w.all_finite()) {
    throw NumericError("subproblem diverged at layer " + std::to_string(objective.layer()) +
                       "; try a smaller learning rate than " + std::to_string(config.gamma));
  }
  return w;
}

nlohmann::json TraceRecord::to_json(std::size_t channels) const {
  nlohmann::json j{{"layer_id", layer_id}, {"granularity", granularity}, {"t", t},
                   {"selected", selected}, {"loss", loss}};
  nlohmann::json p = nlohmann::json::array();
  for (std::size_t q : picks) {
    if (granularity == "kernel") {
      p.push_back({q / channels, q % channels});
    } else {
      p.push_back(q);
    }
  }
  j["picks"] = p;
  j["stop_reason"] = stop_reason.empty() ? nlohmann::json(nullptr) : nlohmann::json(stop_reason);
  return j;
}

SelectionResult greedy_select(const LayerObjective& objective, const SelectionOptions& options) {
  options.policy.validate();
  if (options.B == 0) {
    throw ConfigError("B must be at least 1");
  }
  const ConvParams& layout = objective.layout();
  const Tensor::Shape shape = layout.weights.shape();
  const std::size_t c = shape[1];
  const Granularity gran = options.granularity;
  const std::size_t groups = gran == Granularity::Channel ? c : shape[0] * c;
  std::vector<std::uint8_t> eligible = options.eligible;
  if (eligible.empty()) {
    eligible.assign(groups, 1);
  }
  if (eligible.size() != groups) {
    throw DimensionError("eligibility flags do not match the number of groups");
  }
  if (!options.warm_start.empty() && options.warm_start.shape() != shape) {
    throw DimensionError("warm-start weights do not match the layer");
  }
  const std::size_t n_eligible = static_cast<std::size_t>(
      std::count_if(eligible.begin(), eligible.end(), [](std::uint8_t e) { return e != 0; }));
  const StopPolicy& policy = options.policy;
  std::size_t limit = n_eligible;
  if (policy.kind == StopKind::Budget) {
    limit = std::min(limit, policy.kappa);
  } else if (policy.kind == StopKind::Condition2) {
    limit = std::min(limit, condition2_cap(policy, n_eligible));
  }

  SelectionResult res;
  SelectionState& st = res.state;
  st.w = Tensor(shape, 0.0);
  LayerObjective::Result cur = objective.evaluate(st.w, true);
  st.loss_history.push_back(cur.value.total);
  const char* gname = gran == Granularity::Channel ? "channel" : "kernel";
  res.trace.push_back({layout.layer_id, gname, 0, 0, cur.value.total, {}, ""});

  std::vector<std::uint8_t> active(groups, 0);
  std::vector<std::size_t> excluded;
  for (std::size_t g = 0; g < groups; ++g) {
    if (!eligible[g]) {
      excluded.push_back(g);
    }
  }
  Rng pick_rng(derive_seed(options.seed, 0x5e1ec7));
  const std::size_t area = shape[2] * shape[3];

  while (true) {
    ++st.t;
    const std::size_t room = limit - st.selected.size();
    const std::size_t take = std::min(options.B, room);
    std::vector<std::size_t> picks;
    if (options.criterion == PickCriterion::GradientNorm) {
      const std::vector<double> norms = gran == Granularity::Channel
                                            ? channel_grad_norms(cur.grad)
                                            : kernel_grad_norms(cur.grad);
      picks = pick_top_B(norms, excluded, take);
    } else {
      std::vector<std::size_t> cand;
      for (std::size_t g = 0; g < groups; ++g) {
        if (eligible[g] && !active[g]) {
          cand.push_back(g);
        }
      }
      pick_rng.shuffle(std::span<std::size_t>(cand));
      picks.assign(cand.begin(), cand.begin() + std::min(take, cand.size()));
    }
    // New groups at zero reproduce the previous loss exactly.
    Tensor fallback = st.w;
    for (std::size_t g : picks) {
      active[g] = 1;
      excluded.push_back(g);
      st.selected.push_back(g);
      if (!options.warm_start.empty()) {
        if (gran == Granularity::Channel) {
          for (std::size_t j = 0; j < shape[0]; ++j) {
            std::copy_n(options.warm_start.raw() + (j * c + g) * area, area,
                        st.w.raw() + (j * c + g) * area);
          }
        } else {
          std::copy_n(options.warm_start.raw() + g * area, area, st.w.raw() + g * area);
        }
      }
    }
    st.picks.push_back(picks);
    st.w = solve_subproblem(objective, std::move(st.w), active, gran, options.subproblem,
                            derive_seed(options.seed, st.t));
    LayerObjective::Result next = objective.evaluate(st.w, true);
    // A rise this large is the learning rate, not noise; don't paper over it.
    const double ceiling = kDivergenceFactor * std::max(cur.value.total, st.loss_history.front());
    if (!std::isfinite(next.value.total) || next.value.total > ceiling) {
      throw NumericError("subproblem diverged at layer " + std::to_string(objective.layer()) +
                         "; try a smaller learning rate than " + std::to_string(options.subproblem.gamma));
    }
    if (next.value.total > cur.value.total) {
      st.w = std::move(fallback);
    } else {
      cur = std::move(next);
    }
    st.loss_history.push_back(cur.value.total);

    StopCheck chk = check_stop(st, policy, n_eligible);
    if (!chk.stop && st.selected.size() >= limit) {
      chk = {true, st.selected.size() == n_eligible ? "exhausted" : "cap"};
    }
    res.trace.push_back({layout.layer_id, gname, st.t, st.selected.size(), cur.value.total, picks,
                         chk.reason});
    if (chk.stop) {
      res.stop_reason = chk.reason;
      break;
    }
  }

  res.selected = st.selected;
  std::sort(res.selected.begin(), res.selected.end());
  res.weights = st.w;
  const std::vector<std::uint8_t> kernels = kernel_flags(st.w, active, gran);
  res.kernel_mask.assign(shape[0] * c, 0);
  for (std::size_t q = 0; q < kernels.size(); ++q) {
    res.kernel_mask[q] = kernels[q] && layout.kernel_mask[q] ? 1 : 0;
  }
  zero_inactive(res.weights, res.kernel_mask);
  res.channel_mask.assign(c, 0);
  for (std::size_t j = 0; j < shape[0]; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      res.channel_mask[k] |= res.kernel_mask[j * c + k];
    }
  }
  return res;
}

SelectionResult greedy_select_channels(const LayerObjective& objective, SelectionOptions options) {
  options.granularity = Granularity::Channel;
  return greedy_select(objective, options);
}

void commit_selection(ConvParams& conv, const SelectionResult& result) {
  if (result.weights.shape() != conv.weights.shape()) {
    throw DimensionError("selection result does not match layer " +
                         std::to_string(conv.layer_id));
  }
  conv.weights = result.weights;
  conv.kernel_mask = result.kernel_mask;
  conv.channel_mask = result.channel_mask;
  conv.check_masks();
  conv.enforce_masks();
}

}  // namespace dcp
