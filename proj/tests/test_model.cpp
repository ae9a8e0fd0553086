#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dcp/checkpoint.hpp"
#include "dcp/errors.hpp"
#include "dcp/model.hpp"
#include "oracles.hpp"

using namespace dcp;

namespace {

ArchSpec plain_arch(std::vector<std::size_t> widths, std::size_t hw = 8) {
  ArchSpec a;
  a.in_channels = 3;
  a.height = hw;
  a.width = hw;
  a.classes = 4;
  for (std::size_t w : widths) {
    LayerSpec l;
    l.out_channels = w;
    a.layers.push_back(l);
  }
  return a;
}

// conv1 -> [conv2 -> conv3 + a1] -> conv4
ArchSpec residual_arch() {
  ArchSpec a = plain_arch({6, 6, 6, 8});
  a.layers[2].residual_from = 1;
  return a;
}

Tensor probe(std::size_t n, const ArchSpec& a, Rng& rng) {
  return oracle::random_tensor({n, a.in_channels, a.height, a.width}, rng);
}

void mask_channel(NetworkModel& m, std::size_t layer, std::size_t k) {
  ConvParams& p = m.block(layer).conv;
  p.channel_mask[k] = 0;
  for (std::size_t j = 0; j < p.filters(); ++j) p.kernel_mask[j * p.channels() + k] = 0;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dcp_test_model_" + name);
}

}  // namespace

TEST(BuildNetwork, TwoLayerWeightCount) {
  NetworkModel m = build_network(plain_arch({8, 16}), 1);
  EXPECT_EQ(m.block(1).conv.weights.size() + m.block(2).conv.weights.size(),
            8u * 3 * 9 + 16u * 8 * 9);
  for (const Block& b : m.blocks) {
    for (auto v : b.conv.channel_mask) EXPECT_EQ(v, 1);
    for (auto v : b.conv.kernel_mask) EXPECT_EQ(v, 1);
    ASSERT_TRUE(b.bn.has_value());
    for (double g : b.bn->gamma) EXPECT_EQ(g, 1.0);
    for (double be : b.bn->beta) EXPECT_EQ(be, 0.0);
  }
  EXPECT_EQ(m.classifier.theta.dim(0), 16u);
  EXPECT_EQ(m.classifier.classes(), 4u);
}

TEST(BuildNetwork, KaimingFanInScale) {
  ArchSpec a = plain_arch({64, 64}, 8);
  NetworkModel m = build_network(a, 2);
  const Tensor& w = m.block(2).conv.weights;
  double ss = 0;
  for (double v : w.data()) ss += v * v;
  const double var = ss / static_cast<double>(w.size());
  EXPECT_NEAR(var, 2.0 / (64 * 9), 0.1 * 2.0 / (64 * 9));
}

TEST(BuildNetwork, DeterministicPerSeed) {
  const ArchSpec a = plain_arch({4, 4});
  EXPECT_TRUE(build_network(a, 5).block(2).conv.weights == build_network(a, 5).block(2).conv.weights);
  EXPECT_FALSE(build_network(a, 5).block(2).conv.weights == build_network(a, 6).block(2).conv.weights);
}

TEST(BuildNetwork, DegenerateSpecsAreConfigErrors) {
  ArchSpec zero = plain_arch({4});
  zero.classes = 0;
  EXPECT_THROW(build_network(zero, 1), ConfigError);
  ArchSpec mismatch = plain_arch({4, 6, 8});
  mismatch.layers[2].residual_from = 1;  // 4 channels added to 8
  EXPECT_THROW(build_network(mismatch, 1), ConfigError);
  ArchSpec dims = plain_arch({4, 6});
  dims.layers[1].in_channels = 5;
  EXPECT_THROW(build_network(dims, 1), ConfigError);
  EXPECT_THROW(build_network(plain_arch({}), 1), ConfigError);
}

TEST(Prunability, FirstLayerAndResidualSourcesAreFixed) {
  NetworkModel m = build_network(residual_arch(), 1);
  EXPECT_FALSE(m.prunable(1));  // raw image input
  EXPECT_TRUE(m.feeds_residual(1));
  EXPECT_FALSE(m.prunable(2));  // a1 also travels along the skip
  EXPECT_TRUE(m.prunable(3));
  EXPECT_TRUE(m.prunable(4));
  EXPECT_FALSE(m.feeds_residual(3));
}

TEST(L20Norms, Examples) {
  ConvParams p = ConvParams::dense(Tensor({4, 8, 3, 3}, 0.0));
  EXPECT_EQ(l20_channel_norm(p), 0u);
  EXPECT_EQ(l20_kernel_norm(p), 0u);
  p.weights.at(2, 5, 1, 1) = 0.5;
  EXPECT_EQ(l20_kernel_norm(p), 1u);
  p.weights.at(0, 1, 0, 0) = -1.0;
  p.weights.at(3, 6, 2, 2) = 2.0;
  p.weights.at(1, 6, 2, 2) = 2.0;
  EXPECT_EQ(l20_channel_norm(p), 3u);
  EXPECT_EQ(l20_kernel_norm(p), 4u);
  Rng rng(1);
  const ConvParams dense = ConvParams::dense(oracle::random_tensor({4, 8, 3, 3}, rng));
  EXPECT_EQ(l20_channel_norm(dense), 8u);
  EXPECT_EQ(l20_kernel_norm(dense), 32u);
}

TEST(ChannelBudget, Examples) {
  EXPECT_EQ(channel_budget(16, 0.5), 8u);
  EXPECT_EQ(channel_budget(10, 0.3), 7u);
  EXPECT_EQ(channel_budget(1, 0.9), 1u);
  EXPECT_THROW(channel_budget(8, 0.0), ConfigError);
  EXPECT_THROW(channel_budget(8, 1.0), ConfigError);
  EXPECT_THROW(channel_budget(0, 0.5), ConfigError);
}

TEST(ChannelBudget, CeilingSanity) {
  for (std::size_t c = 1; c <= 64; ++c) {
    for (int e = 1; e < 20; ++e) {
      const double eta = e / 20.0;
      const std::size_t sum = channel_budget(c, eta) + ceil_fraction(eta, c);
      EXPECT_TRUE(sum == c || sum == c + 1) << c << " " << eta;
    }
  }
}

TEST(Masks, AllLiveCompactionIsIdentity) {
  Rng rng(2);
  NetworkModel m = build_network(plain_arch({4, 6, 5}), 3);
  const NetworkModel c = compact_model(m);
  for (std::size_t l = 1; l <= 3; ++l) EXPECT_TRUE(c.block(l).conv.weights == m.block(l).conv.weights);
  const Tensor x = probe(3, m.arch, rng);
  EXPECT_TRUE(infer_logits(m, x) == infer_logits(c, x));
}

TEST(Masks, HalfChannelsCompactAndMatchForward) {
  Rng rng(3);
  NetworkModel m = build_network(plain_arch({6, 8, 8, 4}), 4);
  // Give BN non-trivial statistics so dropped filters would matter if mishandled.
  for (Block& b : m.blocks)
    for (std::size_t j = 0; j < b.bn->gamma.size(); ++j) {
      b.bn->running_mean[j] = rng.normal();
      b.bn->running_var[j] = rng.uniform(0.5, 2);
      b.bn->beta[j] = rng.normal();
    }
  for (std::size_t k = 0; k < 8; k += 2) mask_channel(m, 3, k);
  apply_masks(m);
  const NetworkModel c = compact_model(m);
  EXPECT_EQ(c.block(3).conv.channels(), 4u);
  EXPECT_EQ(c.block(2).conv.filters(), 4u);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = probe(2, m.arch, rng);
    const Tensor a = infer_logits(m, x), b = infer_logits(c, x);
    for (std::size_t q = 0; q < a.size(); ++q) EXPECT_NEAR(a[q], b[q], 1e-12);
  }
}

TEST(Masks, ResidualSourcesKeepTheirFilters) {
  Rng rng(4);
  NetworkModel m = build_network(residual_arch(), 5);
  mask_channel(m, 3, 0);
  mask_channel(m, 3, 3);
  mask_channel(m, 4, 1);  // a3 is the output of the add
  apply_masks(m);
  EXPECT_TRUE(filter_removable(m, 2, 0));
  EXPECT_FALSE(filter_removable(m, 2, 1));
  EXPECT_FALSE(filter_removable(m, 3, 1));
  const NetworkModel c = compact_model(m);
  EXPECT_EQ(c.block(1).conv.filters(), 6u);
  EXPECT_EQ(c.block(2).conv.filters(), 4u);
  EXPECT_EQ(c.block(3).conv.channels(), 4u);
  EXPECT_EQ(c.block(3).conv.filters(), 6u);
  EXPECT_EQ(c.block(4).conv.channels(), 6u);
  EXPECT_EQ(l20_channel_norm(c.block(4).conv), 5u);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = probe(2, m.arch, rng);
    const Tensor a = infer_logits(m, x), b = infer_logits(c, x);
    for (std::size_t q = 0; q < a.size(); ++q) EXPECT_NEAR(a[q], b[q], 1e-12);
  }
}

TEST(Masks, AllChannelsMaskedIsContractError) {
  NetworkModel m = build_network(plain_arch({4, 4}), 1);
  for (std::size_t k = 0; k < 4; ++k) mask_channel(m, 2, k);
  EXPECT_THROW(apply_masks(m), ContractError);
}

TEST(Masks, InconsistentMasksAreContractError) {
  NetworkModel m = build_network(plain_arch({4, 4}), 1);
  m.block(2).conv.channel_mask[1] = 0;  // kernels still live
  EXPECT_THROW(apply_masks(m), ContractError);
}

TEST(CountStats, ClosedFormAndMasking) {
  NetworkModel m = build_network(plain_arch({8, 16}, 8), 1);
  const ModelStats s = count_stats(m);
  // layer 1: 8*3*9*64, layer 2: 16*8*9*64, classifier 16*4
  EXPECT_EQ(s.layers[0].macs, 8u * 3 * 9 * 64);
  EXPECT_EQ(s.layers[1].macs, 16u * 8 * 9 * 64);
  EXPECT_EQ(s.mac_count, 8u * 3 * 9 * 64 + 16u * 8 * 9 * 64 + 16 * 4);
  EXPECT_EQ(s.param_count, 8u * 3 * 9 + 2 * 8 + 16u * 8 * 9 + 2 * 16 + 16 * 4 + 4);

  for (std::size_t k = 0; k < 4; ++k) mask_channel(m, 2, k);
  apply_masks(m);
  const ModelStats h = count_stats(m);
  EXPECT_EQ(2 * h.layers[1].macs, s.layers[1].macs);
  EXPECT_LE(h.mac_count, s.mac_count);
  EXPECT_LE(h.param_count, s.param_count);
}

TEST(CountStats, KernelMaskCountsLiveKernels) {
  NetworkModel m = build_network(plain_arch({4, 4}, 4), 1);
  ConvParams& p = m.block(2).conv;
  p.kernel_mask[0] = 0;
  p.kernel_mask[5] = 0;
  p.kernel_mask[10] = 0;
  apply_masks(m);
  const ModelStats s = count_stats(m);
  EXPECT_EQ(s.layers[1].live_kernels, 13u);
  EXPECT_EQ(s.layers[1].macs, 13u * 9 * 16);
  EXPECT_EQ(s.layers[1].dense_macs, 16u * 9 * 16);
}

TEST(CountStats, MonotoneUnderMasking) {
  Rng rng(6);
  NetworkModel m = build_network(plain_arch({6, 6, 6}, 6), 1);
  ModelStats prev = count_stats(m);
  for (int step = 0; step < 20; ++step) {
    const std::size_t layer = 2 + rng.below(2);
    ConvParams& p = m.block(layer).conv;
    const std::size_t q = rng.below(p.kernel_mask.size());
    p.kernel_mask[q] = 0;
    p.derive_channel_mask();
    if (l20_channel_norm(p) <= 1) break;
    apply_masks(m);
    const ModelStats s = count_stats(m);
    EXPECT_LE(s.mac_count, prev.mac_count);
    EXPECT_LE(s.param_count, prev.param_count);
    prev = s;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(7);
  NetworkModel m = build_network(residual_arch(), 8);
  mask_channel(m, 3, 2);
  m.block(4).conv.kernel_mask[3] = 0;
  apply_masks(m);
  for (Block& b : m.blocks)
    for (double& v : b.bn->running_mean) v = rng.normal();
  const auto path = temp_path("roundtrip.dcpk");
  save_checkpoint(m, path.string(), {{"note", "x"}});
  nlohmann::json extra;
  const NetworkModel r = load_checkpoint(path.string(), &extra);
  EXPECT_EQ(extra["note"], "x");
  for (std::size_t l = 1; l <= m.layer_count(); ++l) {
    EXPECT_TRUE(r.block(l).conv.weights == m.block(l).conv.weights);
    EXPECT_EQ(r.block(l).conv.kernel_mask, m.block(l).conv.kernel_mask);
    EXPECT_EQ(r.block(l).conv.channel_mask, m.block(l).conv.channel_mask);
    EXPECT_EQ(r.block(l).bn->running_mean, m.block(l).bn->running_mean);
    EXPECT_EQ(l20_channel_norm(r.block(l).conv), l20_channel_norm(m.block(l).conv));
    EXPECT_EQ(l20_kernel_norm(r.block(l).conv), l20_kernel_norm(m.block(l).conv));
  }
  EXPECT_EQ(count_stats(r).mac_count, count_stats(m).mac_count);
  EXPECT_EQ(count_stats(r).param_count, count_stats(m).param_count);
  const Tensor x = probe(3, m.arch, rng);
  EXPECT_TRUE(infer_logits(r, x) == infer_logits(m, x));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  NetworkModel m = build_network(plain_arch({4, 4}), 1);
  const auto path = temp_path("corrupt.dcpk");
  save_checkpoint(m, path.string());
  const auto size = std::filesystem::file_size(path);

  std::filesystem::resize_file(path, size - 16);
  EXPECT_THROW(load_checkpoint(path.string()), FormatError);

  save_checkpoint(m, path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t version = 99;
    f.write(reinterpret_cast<const char*>(&version), 4);
  }
  try {
    load_checkpoint(path.string());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 99"), std::string::npos) << e.what();
  }

  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE and some more bytes";
  }
  EXPECT_THROW(load_checkpoint(path.string()), FormatError);
  std::filesystem::remove(path);
}
