#include <string>

#include "dcp/errors.hpp"
#include "dcp/selection.hpp"

namespace dcp {

std::size_t kernel_budget(std::size_t filters, std::size_t live_channels, double eta) {
  if (filters == 0 || live_channels == 0) {
    throw ConfigError("kernel budget needs at least one filter and one live channel");
  }
  if (!(eta > 0.0 && eta < 1.0)) {
    throw ConfigError("pruning rate must lie in (0, 1), got " + std::to_string(eta));
  }
  return ceil_fraction(1.0 - eta, filters * live_channels);
}

std::vector<std::uint8_t> live_kernel_candidates(const ConvParams& conv) {
  const std::size_t n = conv.filters(), c = conv.channels();
  std::vector<std::uint8_t> out(n * c, 0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      out[j * c + k] = conv.channel_live(k) && conv.kernel_live(j, k) ? 1 : 0;
    }
  }
  return out;
}

SelectionResult greedy_select_kernels(const LayerObjective& objective, SelectionOptions options) {
  options.granularity = Granularity::Kernel;
  if (options.B == 0) {
    options.B = objective.layout().filters();
  }
  if (options.eligible.empty()) {
    options.eligible = live_kernel_candidates(objective.layout());
  }
  return greedy_select(objective, options);
}

}  // namespace dcp
