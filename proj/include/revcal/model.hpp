#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "revcal/graph.hpp"
#include "revcal/optim.hpp"
#include "revcal/tensor.hpp"
#include "json.hpp"

namespace revcal {

enum class Family { linear, mlp, convnet, calibrater };
enum class MergeMode { additive, multiplicative };
enum class Activation { relu, tanh };

std::string to_string(Family f);
std::string to_string(MergeMode m);
Family parse_family(const std::string& s);
MergeMode parse_merge_mode(const std::string& s);

// Architecture record. Which fields matter depends on the family:
//   linear      input_shape, num_classes
//   mlp         input_shape, num_classes, hidden (layer widths), activation
//   convnet     input_shape [C,H,W], num_classes, hidden = {conv1, conv2, dense}
//   calibrater  image input [C,H,W]: channels, res_blocks, down_layers, up_layers
//               vector input [D]: hidden widths, activation
//               both: head, epsilon (additive head scale), head_init_scale
struct ArchSpec {
  Family family = Family::linear;
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<std::size_t> hidden;
  Activation activation = Activation::relu;
  std::size_t channels = 8;
  std::size_t res_blocks = 1;
  std::size_t down_layers = 3;
  std::size_t up_layers = 3;
  MergeMode head = MergeMode::multiplicative;
  double epsilon = 1.0;
  double head_init_scale = 0.1;
  std::uint64_t seed = 0;

  bool is_classifier() const { return family != Family::calibrater; }
};

void validate(const ArchSpec& spec);
nlohmann::json to_json(const ArchSpec& spec);
ArchSpec arch_from_json(const nlohmann::json& j);

struct Param {
  std::string name;
  Tensor tensor;
};

// Codebooks/levels recorded by the quantizer, persisted in the spec record.
struct QuantRecord {
  int bits = 0;
  std::string method;
  std::map<std::string, std::vector<double>> codebooks;
};

class Model {
 public:
  Model() = default;
  Model(std::string name, ArchSpec spec, std::vector<Param> params);

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  const ArchSpec& spec() const { return spec_; }
  bool frozen() const { return frozen_; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  ParamSet parameter_set();

  // Per-example output shape: [num_classes] for classifiers, input_shape for calibraters.
  Shape output_shape() const;

  // Builds the forward pass on a batch x[N, ...input_shape]; parameters are
  // registered as leaves so they receive grads unless frozen.
  NodeId forward(Graph& g, NodeId x);
  // Plain evaluation without gradient bookkeeping.
  Tensor infer(const Tensor& x) const;

  void freeze();
  void set_frozen_flag(bool frozen);

  std::optional<QuantRecord> quantization;

 private:
  NodeId build(Graph& g, NodeId x, const std::function<NodeId(const std::string&)>& bind) const;

  std::string name_;
  ArchSpec spec_;
  std::vector<Param> params_;
  bool frozen_ = false;
};

Model build_model(const ArchSpec& spec);
Model build_model(ArchSpec spec, std::uint64_t seed);

std::vector<std::size_t> argmax_rows(const Tensor& logits);
std::vector<std::size_t> classify(const Model& model, const Tensor& x);
std::size_t count_params(const Model& model);
std::string param_hash(const Model& model);
void freeze(Model& model);

// Sets every calibrater parameter to zero, which makes the head emit exactly
// the identity perturbation (1 for multiplicative, 0 for additive).
void make_identity(Model& calibrater);

// Largest image calibrater (by parameter count) whose size does not exceed
// `fraction` of `main_params`, searching res_blocks in [0, max_blocks] and
// channels in [1, max_channels].
struct CalibraterSize {
  std::size_t res_blocks = 0;
  std::size_t channels = 0;
  std::size_t param_count = 0;
};
std::size_t calibrater_param_count(const ArchSpec& spec);
CalibraterSize size_calibrater(const ArchSpec& base, std::size_t main_params, double fraction = 0.1,
                               std::size_t max_blocks = 4, std::size_t max_channels = 32);
// Parameters added by one residual block at the given width.
std::size_t residual_block_params(std::size_t channels);

inline constexpr std::uint16_t kModelFormatVersion = 1;
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
std::vector<std::byte> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::byte> bytes, const std::string& what = "model");

}  // namespace revcal
