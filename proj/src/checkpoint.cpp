#include "dcp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dcp/errors.hpp"

namespace dcp {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'P', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "container IO assumes little-endian");

using nlohmann::json;

// Name -> storage pointer for every array of the model, in file order.
struct ArrayRef {
  std::string name;
  double* data;
  std::size_t size;
  std::vector<std::size_t> shape;
};

std::vector<ArrayRef> arrays_of(NetworkModel& m) {
  std::vector<ArrayRef> out;
  auto vec = [&](const std::string& name, std::vector<double>& v) {
    out.push_back({name, v.data(), v.size(), {v.size()}});
  };
  auto ten = [&](const std::string& name, Tensor& t) {
    out.push_back({name, t.raw(), t.size(), {t.dim(0), t.dim(1), t.dim(2), t.dim(3)}});
  };
  auto bn = [&](const std::string& p, BatchNormParams& b) {
    vec(p + ".gamma", b.gamma);
    vec(p + ".beta", b.beta);
    vec(p + ".running_mean", b.running_mean);
    vec(p + ".running_var", b.running_var);
  };
  auto head = [&](const std::string& p, LossHead& h) {
    if (h.bn) {
      bn(p + ".bn", *h.bn);
    }
    ten(p + ".theta", h.theta);
    if (h.has_bias()) {
      ten(p + ".bias", h.bias);
    }
  };
  for (std::size_t l = 1; l <= m.layer_count(); ++l) {
    Block& b = m.block(l);
    const std::string p = "layer" + std::to_string(l);
    ten(p + ".weight", b.conv.weights);
    if (!b.conv.bias.empty()) {
      vec(p + ".bias", b.conv.bias);
    }
    if (b.bn) {
      bn(p + ".bn", *b.bn);
    }
  }
  head("classifier", m.classifier);
  for (std::size_t h = 0; h < m.heads.size(); ++h) {
    head("head" + std::to_string(h + 1), m.heads[h]);
  }
  return out;
}

json head_meta(const LossHead& h) {
  return json{{"attach_layer", h.attach_layer}, {"p_index", h.p_index},
              {"bn", h.bn.has_value()},          {"bias", h.has_bias()},
              {"criterion", h.criterion->name()}, {"inputs", h.input_channels()},
              {"classes", h.classes()}};
}

LossHead head_from_meta(const json& j) {
  LossHead h;
  h.attach_layer = j.at("attach_layer").get<int>();
  h.p_index = j.at("p_index").get<int>();
  const auto d = j.at("inputs").get<std::size_t>(), m = j.at("classes").get<std::size_t>();
  if (j.at("bn").get<bool>()) {
    h.bn = BatchNormParams::identity(d);
  }
  h.theta = Tensor({d, m, 1, 1});
  if (j.at("bias").get<bool>()) {
    h.bias = Tensor({1, m, 1, 1});
  }
  h.criterion = criterion_by_name(j.at("criterion").get<std::string>());
  return h;
}

}  // namespace

void save_checkpoint(const NetworkModel& model, const std::string& path, const json& extra) {
  NetworkModel copy = model;
  json layers = json::array();
  for (const Block& b : copy.blocks) {
    layers.push_back({{"layer_id", b.conv.layer_id},
                      {"spec", b.spec},
                      {"channel_mask", b.conv.channel_mask},
                      {"kernel_mask", b.conv.kernel_mask}});
  }
  json heads = json::array();
  for (const LossHead& h : copy.heads) {
    heads.push_back(head_meta(h));
  }
  json manifest = json::array();
  const std::vector<ArrayRef> arrays = arrays_of(copy);
  for (const ArrayRef& a : arrays) {
    manifest.push_back({{"name", a.name}, {"shape", a.shape}});
  }
  const json meta{{"arch", copy.arch},
                  {"role", copy.role == ModelRole::Baseline ? "baseline" : "working"},
                  {"layers", layers},
                  {"classifier", head_meta(copy.classifier)},
                  {"heads", heads},
                  {"head_points", copy.head_points()},
                  {"arrays", manifest},
                  {"extra", extra}};
  const std::string text = meta.dump();
  std::string out(kMagic, 4);
  const std::uint32_t version = kVersion;
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += text;
  for (const ArrayRef& a : arrays) {
    out.append(reinterpret_cast<const char*>(a.data), a.size * sizeof(double));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size()))) {
    throw FormatError(path + ": cannot write checkpoint");
  }
}

NetworkModel load_checkpoint(const std::string& path, json* extra) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw FormatError(path + ": cannot open checkpoint");
  }
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < 16 || std::memcmp(in.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": not a DCPK checkpoint (bad magic or truncated header)");
  }
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, in.data() + 4, 4);
  std::memcpy(&len, in.data() + 8, 8);
  if (version != kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kVersion) + ")");
  }
  if (16 + len > in.size()) {
    throw FormatError(path + ": truncated checkpoint metadata");
  }
  NetworkModel m;
  std::size_t pos = 16 + len;
  try {
    const json meta = json::parse(in.substr(16, len));
    m.arch = meta.at("arch").get<ArchSpec>();
    m.arch.validate();
    m.role = meta.at("role").get<std::string>() == "baseline" ? ModelRole::Baseline
                                                              : ModelRole::Working;
    const json& layers = meta.at("layers");
    if (layers.size() != m.arch.layers.size()) {
      throw FormatError(path + ": layer list does not match the architecture");
    }
    for (const json& lj : layers) {
      Block b;
      b.spec = lj.at("spec").get<LayerSpec>();
      const std::size_t c = b.spec.in_channels.value_or(0);
      b.conv.weights = Tensor({b.spec.out_channels, c, b.spec.kernel, b.spec.kernel});
      b.conv.layer_id = lj.at("layer_id").get<int>();
      b.conv.channel_mask = lj.at("channel_mask").get<std::vector<std::uint8_t>>();
      b.conv.kernel_mask = lj.at("kernel_mask").get<std::vector<std::uint8_t>>();
      if (b.spec.bias) {
        b.conv.bias.assign(b.spec.out_channels, 0.0);
      }
      if (b.spec.batch_norm) {
        b.bn = BatchNormParams::identity(b.spec.out_channels);
      }
      m.blocks.push_back(std::move(b));
    }
    m.classifier = head_from_meta(meta.at("classifier"));
    for (const json& hj : meta.at("heads")) {
      m.heads.push_back(head_from_meta(hj));
    }
    const json& manifest = meta.at("arrays");
    std::vector<ArrayRef> arrays = arrays_of(m);
    if (manifest.size() != arrays.size()) {
      throw FormatError(path + ": array manifest does not match the architecture");
    }
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      if (manifest[i].at("name").get<std::string>() != arrays[i].name ||
          manifest[i].at("shape").get<std::vector<std::size_t>>() != arrays[i].shape) {
        throw FormatError(path + ": array '" + arrays[i].name + "' has an unexpected shape");
      }
      const std::size_t bytes = arrays[i].size * sizeof(double);
      if (pos + bytes > in.size()) {
        throw FormatError(path + ": truncated checkpoint data");
      }
      std::memcpy(arrays[i].data, in.data() + pos, bytes);
      pos += bytes;
    }
    if (extra) {
      *extra = meta.value("extra", json::object());
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": corrupt checkpoint metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path + ": checkpoint architecture is invalid: " + e.what());
  }
  if (pos != in.size()) {
    throw FormatError(path + ": trailing bytes after checkpoint data");
  }
  try {
    for (Block& b : m.blocks) {
      b.conv.check_masks();
    }
  } catch (const ContractError& e) {
    throw FormatError(path + ": inconsistent masks: " + e.what());
  }
  return m;
}

}  // namespace dcp
