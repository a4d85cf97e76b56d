#include "revcal/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "binio.hpp"
#include "revcal/error.hpp"
#include "revcal/hashing.hpp"

namespace revcal {

namespace {

constexpr std::size_t kLeNetKernel = 5;
constexpr std::size_t kCalibKernel = 3;

struct Decl {
  std::string name;
  Shape shape;
  std::size_t fan_in;
  bool head;
};

struct ConvnetDims {
  std::size_t c1, c2, dense, flat;
};

ConvnetDims convnet_dims(const ArchSpec& s) {
  const std::size_t c1 = s.hidden.size() > 0 ? s.hidden[0] : 6;
  const std::size_t c2 = s.hidden.size() > 1 ? s.hidden[1] : 16;
  const std::size_t dense = s.hidden.size() > 2 ? s.hidden[2] : 64;
  std::size_t h = s.input_shape[1], w = s.input_shape[2];
  for (int stage = 0; stage < 2; ++stage) {
    if (h < kLeNetKernel + 1 || w < kLeNetKernel + 1)
      fail("convnet: input " + shape_str(s.input_shape) + " too small for two conv+pool stages");
    h = (h - kLeNetKernel + 1) / 2;
    w = (w - kLeNetKernel + 1) / 2;
  }
  return {c1, c2, dense, c2 * h * w};
}

// Spatial sizes along the down path: sizes[0] is the input, sizes[i+1] the
// output of down layer i (stride 2, kernel 3, pad 1).
std::vector<std::size_t> down_sizes(std::size_t n, std::size_t layers) {
  std::vector<std::size_t> s{n};
  for (std::size_t i = 0; i < layers; ++i) s.push_back((s.back() + 2 - kCalibKernel) / 2 + 1);
  return s;
}

std::size_t up_output_padding(std::size_t in, std::size_t target) {
  const long op = static_cast<long>(target) - static_cast<long>(2 * in - 1);
  if (op < 0 || op > 1) fail("calibrater: up-sampling cannot restore size " + std::to_string(target));
  return static_cast<std::size_t>(op);
}

bool image_calibrater(const ArchSpec& s) { return s.family == Family::calibrater && s.input_shape.size() == 3; }

std::vector<std::size_t> vector_widths(const ArchSpec& s) {
  return s.hidden.empty() ? std::vector<std::size_t>{16, 16} : s.hidden;
}

std::vector<Decl> layout(const ArchSpec& s) {
  std::vector<Decl> d;
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out, bool head = false) {
    d.push_back({name + ".weight", {in, out}, in, head});
    d.push_back({name + ".bias", {out}, in, head});
  };
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool head = false) {
    d.push_back({name + ".weight", {out, in, k, k}, in * k * k, head});
    d.push_back({name + ".bias", {out}, in * k * k, head});
  };
  auto tconv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool head = false) {
    d.push_back({name + ".weight", {in, out, k, k}, in * k * k, head});
    d.push_back({name + ".bias", {out}, in * k * k, head});
  };

  switch (s.family) {
    case Family::linear:
      dense("fc", numel(s.input_shape), s.num_classes);
      break;
    case Family::mlp: {
      std::size_t in = numel(s.input_shape);
      for (std::size_t i = 0; i < s.hidden.size(); ++i) {
        dense("fc" + std::to_string(i), in, s.hidden[i]);
        in = s.hidden[i];
      }
      dense("fc" + std::to_string(s.hidden.size()), in, s.num_classes);
      break;
    }
    case Family::convnet: {
      const auto dims = convnet_dims(s);
      conv("conv1", dims.c1, s.input_shape[0], kLeNetKernel);
      conv("conv2", dims.c2, dims.c1, kLeNetKernel);
      dense("fc1", dims.flat, dims.dense);
      dense("fc2", dims.dense, s.num_classes);
      break;
    }
    case Family::calibrater: {
      if (image_calibrater(s)) {
        const std::size_t cin = s.input_shape[0], c = s.channels;
        for (std::size_t i = 0; i < s.down_layers; ++i) conv("down" + std::to_string(i), c, i == 0 ? cin : c, kCalibKernel);
        for (std::size_t j = 0; j < s.res_blocks; ++j) {
          conv("res" + std::to_string(j) + ".a", c, c, kCalibKernel);
          conv("res" + std::to_string(j) + ".b", c, c, kCalibKernel);
        }
        for (std::size_t i = 0; i < s.up_layers; ++i) {
          const bool last = i + 1 == s.up_layers;
          tconv("up" + std::to_string(i), c, last ? cin : c, kCalibKernel, last);
        }
      } else {
        const std::size_t dim = numel(s.input_shape);
        const auto widths = vector_widths(s);
        std::size_t in = dim;
        for (std::size_t i = 0; i < widths.size(); ++i) {
          dense("fc" + std::to_string(i), in, widths[i]);
          in = widths[i];
        }
        dense("fc" + std::to_string(widths.size()), in, dim, true);
      }
      break;
    }
  }
  return d;
}

NodeId activate(Graph& g, NodeId x, Activation a) { return a == Activation::relu ? g.relu(x) : g.tanh(x); }

}  // namespace

std::string to_string(Family f) {
  switch (f) {
    case Family::linear: return "linear";
    case Family::mlp: return "mlp";
    case Family::convnet: return "convnet";
    case Family::calibrater: return "calibrater";
  }
  return "unknown";
}

std::string to_string(MergeMode m) { return m == MergeMode::additive ? "additive" : "multiplicative"; }

Family parse_family(const std::string& s) {
  if (s == "linear") return Family::linear;
  if (s == "mlp") return Family::mlp;
  if (s == "convnet") return Family::convnet;
  if (s == "calibrater") return Family::calibrater;
  fail("unknown model family '" + s + "'");
}

MergeMode parse_merge_mode(const std::string& s) {
  if (s == "additive") return MergeMode::additive;
  if (s == "multiplicative") return MergeMode::multiplicative;
  fail("unknown merge mode '" + s + "' (expected additive or multiplicative)");
}

void validate(const ArchSpec& s) {
  if (s.input_shape.empty()) fail("arch: input_shape must be given");
  for (auto d : s.input_shape)
    if (d == 0) fail("arch: input_shape dimensions must be positive");
  if (s.is_classifier() && s.num_classes < 2) fail("arch: classifier families need at least 2 classes");
  for (auto h : s.hidden)
    if (h == 0) fail("arch: hidden widths must be positive");
  switch (s.family) {
    case Family::linear:
    case Family::mlp:
      break;
    case Family::convnet:
      if (s.input_shape.size() != 3) fail("convnet: input_shape must be [C,H,W]");
      convnet_dims(s);
      break;
    case Family::calibrater:
      if (s.head == MergeMode::additive && !(s.epsilon > 0.0)) fail("calibrater: additive head needs epsilon > 0");
      if (!(s.head_init_scale >= 0.0)) fail("calibrater: head_init_scale must be >= 0");
      if (s.input_shape.size() == 3) {
        if (s.channels == 0) fail("calibrater: channels must be positive");
        if (s.down_layers != s.up_layers)
          fail("calibrater: " + std::to_string(s.down_layers) + " down-sampling layers cannot be undone by " +
               std::to_string(s.up_layers) + " up-sampling layers; output would not match input shape");
        if (s.up_layers == 0) fail("calibrater: need at least one down/up-sampling layer");
        const auto hs = down_sizes(s.input_shape[1], s.down_layers);
        const auto ws = down_sizes(s.input_shape[2], s.down_layers);
        for (std::size_t i = 0; i < s.up_layers; ++i) {
          const std::size_t k = s.down_layers - i;
          if (up_output_padding(hs[k], hs[k - 1]) != up_output_padding(ws[k], ws[k - 1]))
            fail("calibrater: height and width need matching parity along the down path");
        }
      } else if (s.input_shape.size() != 1) {
        fail("calibrater: input must be [C,H,W] or a feature vector");
      }
      break;
  }
}

nlohmann::json to_json(const ArchSpec& s) {
  return nlohmann::json{{"family", to_string(s.family)},
                        {"input_shape", s.input_shape},
                        {"num_classes", s.num_classes},
                        {"hidden", s.hidden},
                        {"activation", s.activation == Activation::relu ? "relu" : "tanh"},
                        {"channels", s.channels},
                        {"res_blocks", s.res_blocks},
                        {"down_layers", s.down_layers},
                        {"up_layers", s.up_layers},
                        {"head", to_string(s.head)},
                        {"epsilon", s.epsilon},
                        {"head_init_scale", s.head_init_scale},
                        {"seed", s.seed}};
}

ArchSpec arch_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail("arch: expected a JSON object");
  ArchSpec s;
  try {
    s.family = parse_family(j.at("family").get<std::string>());
    s.input_shape = j.at("input_shape").get<Shape>();
    s.num_classes = j.value("num_classes", std::size_t{0});
    s.hidden = j.value("hidden", std::vector<std::size_t>{});
    const std::string act = j.value("activation", std::string("relu"));
    if (act != "relu" && act != "tanh") fail("arch: unknown activation '" + act + "'");
    s.activation = act == "relu" ? Activation::relu : Activation::tanh;
    s.channels = j.value("channels", s.channels);
    s.res_blocks = j.value("res_blocks", s.res_blocks);
    s.down_layers = j.value("down_layers", s.down_layers);
    s.up_layers = j.value("up_layers", s.up_layers);
    s.head = parse_merge_mode(j.value("head", std::string("multiplicative")));
    s.epsilon = j.value("epsilon", s.epsilon);
    s.head_init_scale = j.value("head_init_scale", s.head_init_scale);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("arch: ") + e.what());
  }
  return s;
}

Model::Model(std::string name, ArchSpec spec, std::vector<Param> params)
    : name_(std::move(name)), spec_(std::move(spec)), params_(std::move(params)) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    for (std::size_t j = i + 1; j < params_.size(); ++j)
      if (params_[i].name == params_[j].name) fail("model: duplicate parameter name '" + params_[i].name + "'");
}

Tensor& Model::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  fail("model '" + name_ + "' has no parameter '" + name + "'");
}

const Tensor& Model::param(const std::string& name) const { return const_cast<Model*>(this)->param(name); }

ParamSet Model::parameter_set() {
  ParamSet set;
  for (auto& p : params_) set.push_back({p.name, &p.tensor});
  return set;
}

Shape Model::output_shape() const {
  if (spec_.is_classifier()) return {spec_.num_classes};
  return spec_.input_shape;
}

void Model::freeze() {
  frozen_ = true;
  for (auto& p : params_) {
    p.tensor.requires_grad = false;
    p.tensor.grad.reset();
  }
}

void Model::set_frozen_flag(bool frozen) {
  if (frozen) {
    freeze();
    return;
  }
  frozen_ = false;
  for (auto& p : params_) p.tensor.requires_grad = true;
}

NodeId Model::forward(Graph& g, NodeId x) {
  return build(g, x, [&](const std::string& name) { return g.leaf(param(name)); });
}

Tensor Model::infer(const Tensor& x) const {
  Graph g;
  const NodeId in = g.constant(Tensor(x.shape, x.data));
  const NodeId out = build(g, in, [&](const std::string& name) { return g.constant(Tensor(param(name).shape, param(name).data)); });
  const Tensor& v = g.value(out);
  return Tensor(v.shape, v.data);
}

NodeId Model::build(Graph& g, NodeId x, const std::function<NodeId(const std::string&)>& bind) const {
  const Shape in_shape = g.shape(x);
  const Shape& per = spec_.input_shape;
  if (in_shape.size() != per.size() + 1 || !std::equal(per.begin(), per.end(), in_shape.begin() + 1))
    fail("model '" + name_ + "': expected input [N," + shape_str(per).substr(1) + " got " + shape_str(in_shape));
  const std::size_t batch = in_shape[0];
  auto dense = [&](NodeId h, const std::string& name) {
    return g.add(g.matmul(h, bind(name + ".weight")), bind(name + ".bias"));
  };
  auto conv = [&](NodeId h, const std::string& name, std::size_t stride, std::size_t pad) {
    return g.add(g.conv2d(h, bind(name + ".weight"), stride, pad), bind(name + ".bias"));
  };
  auto head = [&](NodeId z) {
    const NodeId t = g.tanh(z);
    return spec_.head == MergeMode::multiplicative ? g.affine(t, 1.0, 1.0) : g.affine(t, spec_.epsilon, 0.0);
  };

  switch (spec_.family) {
    case Family::linear:
      return dense(g.reshape(x, {batch, numel(per)}), "fc");
    case Family::mlp: {
      NodeId h = g.reshape(x, {batch, numel(per)});
      for (std::size_t i = 0; i < spec_.hidden.size(); ++i) h = activate(g, dense(h, "fc" + std::to_string(i)), spec_.activation);
      return dense(h, "fc" + std::to_string(spec_.hidden.size()));
    }
    case Family::convnet: {
      const auto dims = convnet_dims(spec_);
      NodeId h = g.max_pool2d(g.relu(conv(x, "conv1", 1, 0)), 2, 2);
      h = g.max_pool2d(g.relu(conv(h, "conv2", 1, 0)), 2, 2);
      h = g.relu(dense(g.reshape(h, {batch, dims.flat}), "fc1"));
      return dense(h, "fc2");
    }
    case Family::calibrater: {
      if (!image_calibrater(spec_)) {
        const auto widths = vector_widths(spec_);
        NodeId h = g.reshape(x, {batch, numel(per)});
        for (std::size_t i = 0; i < widths.size(); ++i) h = activate(g, dense(h, "fc" + std::to_string(i)), spec_.activation);
        return g.reshape(head(dense(h, "fc" + std::to_string(widths.size()))), in_shape);
      }
      const auto hs = down_sizes(per[1], spec_.down_layers);
      NodeId h = x;
      for (std::size_t i = 0; i < spec_.down_layers; ++i) h = g.relu(conv(h, "down" + std::to_string(i), 2, 1));
      for (std::size_t j = 0; j < spec_.res_blocks; ++j) {
        const std::string n = "res" + std::to_string(j);
        const NodeId inner = conv(g.relu(conv(h, n + ".a", 1, 1)), n + ".b", 1, 1);
        h = g.add(h, inner);
      }
      for (std::size_t i = 0; i < spec_.up_layers; ++i) {
        const std::size_t k = spec_.down_layers - i;
        const std::string n = "up" + std::to_string(i);
        const std::size_t op = up_output_padding(hs[k], hs[k - 1]);
        h = g.add(g.conv_transpose2d(h, bind(n + ".weight"), 2, 1, op), bind(n + ".bias"));
        if (i + 1 < spec_.up_layers) h = g.relu(h);
      }
      return head(h);
    }
  }
  fail("model: unknown family");
}

Model build_model(const ArchSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::vector<Param> params;
  for (const auto& d : layout(spec)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d.fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(d.shape);
    for (double& v : t.data) v = u(rng) * (d.head ? spec.head_init_scale : 1.0);
    t.requires_grad = true;
    params.push_back({d.name, std::move(t)});
  }
  return Model(to_string(spec.family), spec, std::move(params));
}

Model build_model(ArchSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  return build_model(spec);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) fail("argmax_rows: expected [N,C] logits, got " + shape_str(logits.shape));
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data.data() + i * c;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

std::vector<std::size_t> classify(const Model& model, const Tensor& x) {
  if (!model.spec().is_classifier()) fail("classify: model '" + model.name() + "' is not a classifier");
  return argmax_rows(model.infer(x));
}

std::size_t count_params(const Model& model) {
  std::size_t n = 0;
  for (const auto& p : model.params()) n += p.tensor.size();
  return n;
}

std::string param_hash(const Model& model) {
  Hasher h;
  for (const auto& p : model.params()) {
    h.update(p.name);
    h.update(std::uint64_t{p.tensor.rank()});
    for (auto d : p.tensor.shape) h.update(std::uint64_t{d});
    h.update(std::span<const double>(p.tensor.data));
  }
  return h.hex();
}

void freeze(Model& model) { model.freeze(); }

void make_identity(Model& calibrater) {
  if (calibrater.spec().family != Family::calibrater) fail("make_identity: not a calibrater");
  for (auto& p : calibrater.params()) std::fill(p.tensor.data.begin(), p.tensor.data.end(), 0.0);
}

std::size_t residual_block_params(std::size_t c) { return 2 * (c * c * kCalibKernel * kCalibKernel + c); }

std::size_t calibrater_param_count(const ArchSpec& spec) {
  std::size_t n = 0;
  for (const auto& d : layout(spec)) n += numel(d.shape);
  return n;
}

CalibraterSize size_calibrater(const ArchSpec& base, std::size_t main_params, double fraction,
                               std::size_t max_blocks, std::size_t max_channels) {
  const double budget = fraction * static_cast<double>(main_params);
  CalibraterSize best;
  for (std::size_t b = 0; b <= max_blocks; ++b)
    for (std::size_t c = 1; c <= max_channels; ++c) {
      ArchSpec s = base;
      s.family = Family::calibrater;
      s.res_blocks = b;
      s.channels = c;
      const std::size_t n = calibrater_param_count(s);
      if (static_cast<double>(n) <= budget && n > best.param_count) best = {b, c, n};
    }
  if (best.channels == 0) fail("size_calibrater: no calibrater fits in " + std::to_string(budget) + " parameters");
  return best;
}

namespace {

nlohmann::json spec_record(const Model& m) {
  nlohmann::json j{{"name", m.name()}, {"frozen", m.frozen()}, {"arch", to_json(m.spec())}};
  if (m.quantization) {
    nlohmann::json cb = nlohmann::json::object();
    for (const auto& [name, values] : m.quantization->codebooks) cb[name] = values;
    j["quantization"] = {{"bits", m.quantization->bits}, {"method", m.quantization->method}, {"codebooks", cb}};
  }
  return j;
}

constexpr char kModelMagic[4] = {'R', 'V', 'C', 'L'};

}  // namespace

std::vector<std::byte> serialize_model(const Model& model) {
  binio::Writer w;
  w.raw(std::string_view(kModelMagic, 4));
  w.u16(kModelFormatVersion);
  w.str(spec_record(model).dump());
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.str(p.name);
    w.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape) w.u32(static_cast<std::uint32_t>(d));
    w.f64s(p.tensor.data);
  }
  const auto& b = w.bytes();
  w.u32(crc32(std::span<const std::byte>(b).subspan(4)));
  return w.bytes();
}

Model deserialize_model(std::span<const std::byte> bytes, const std::string& what) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) fail_io(what + ": bad magic (not a model file)");
  if (bytes.size() < 4 + 2 + 4 + 4 + 4) fail_io(what + ": truncated file");
  const auto body = bytes.subspan(4, bytes.size() - 8);
  binio::Reader tail(bytes.subspan(bytes.size() - 4), what);
  if (crc32(body) != tail.u32()) fail_io(what + ": checksum mismatch (file corrupt or truncated)");

  binio::Reader r(body, what);
  const auto version = r.u16();
  if (version != kModelFormatVersion) fail_io(what + ": unsupported format version " + std::to_string(version));
  nlohmann::json rec;
  try {
    rec = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    fail_io(what + ": corrupt spec record: " + e.what());
  }
  ArchSpec spec = arch_from_json(rec.at("arch"));
  const auto count = r.u32();
  std::vector<Param> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rank = r.u8();
    Shape shape;
    for (unsigned k = 0; k < rank; ++k) shape.push_back(r.u32());
    if (numel(shape) * 8 > r.remaining()) fail_io(what + ": truncated file");
    Tensor t(shape);
    r.f64s(t.data);
    params.push_back({std::move(name), std::move(t)});
  }
  if (r.remaining() != 0) fail_io(what + ": trailing bytes after parameters");
  Model m(rec.value("name", to_string(spec.family)), spec, std::move(params));
  m.set_frozen_flag(rec.value("frozen", false));
  if (rec.contains("quantization")) {
    const auto& q = rec["quantization"];
    QuantRecord qr;
    qr.bits = q.at("bits").get<int>();
    qr.method = q.at("method").get<std::string>();
    for (const auto& [name, values] : q.at("codebooks").items()) qr.codebooks[name] = values.get<std::vector<double>>();
    m.quantization = std::move(qr);
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  binio::write_file(path, serialize_model(model));
}

Model load_model(const std::filesystem::path& path) {
  return deserialize_model(binio::read_file(path), path.string());
}

}  // namespace revcal
