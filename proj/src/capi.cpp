#include "revcal.h"

#include <cstring>
#include <string>

#include "revcal/data.hpp"
#include "revcal/error.hpp"
#include "revcal/experiments.hpp"
#include "revcal/model.hpp"
#include "revcal/training.hpp"
#include "revcal/transforms.hpp"

struct revcal_model {
  revcal::Model model;
};

struct revcal_dataset {
  revcal::Dataset data;
};

namespace {

thread_local std::string g_last_error;

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <class F>
revcal_status guard(F&& f) {
  try {
    g_last_error.clear();
    f();
    return REVCAL_OK;
  } catch (const revcal::Error& e) {
    g_last_error = e.what();
    return static_cast<revcal_status>(static_cast<int>(e.kind()));
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return REVCAL_ERR_CONFIG;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return REVCAL_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return REVCAL_ERR_CONFIG;
  }
}

void need(const void* p, const char* what) {
  if (!p) revcal::fail(std::string(what) + " must not be NULL");
}

}  // namespace

extern "C" {

const char* revcal_version(void) { return revcal::kToolVersion; }

const char* revcal_last_error(void) { return g_last_error.c_str(); }

void revcal_free_string(char* s) { std::free(s); }

const char* revcal_subcommands(void) {
  static const std::string joined = [] {
    std::string s;
    for (const auto& n : revcal::subcommand_names()) s += (s.empty() ? "" : " ") + n;
    return s;
  }();
  return joined.c_str();
}

revcal_status revcal_run(const char* subcommand, const char* config_text, const char* overrides_json,
                         char** manifest_json) {
  return guard([&] {
    need(subcommand, "subcommand");
    need(config_text, "config_text");
    const auto config = revcal::parse_config(config_text);
    const auto overrides = overrides_json ? revcal::parse_config(overrides_json, "overrides") : nlohmann::json::object();
    const auto manifest = revcal::run_subcommand(subcommand, config, overrides);
    if (manifest_json) *manifest_json = dup(manifest.dump(2));
  });
}

revcal_status revcal_model_load(const char* path, revcal_model** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new revcal_model{revcal::load_model(path)};
  });
}

revcal_status revcal_model_save(const revcal_model* model, const char* path) {
  return guard([&] {
    need(model, "model");
    need(path, "path");
    revcal::save_model(model->model, path);
  });
}

void revcal_model_free(revcal_model* model) { delete model; }

revcal_status revcal_model_info(const revcal_model* model, char** info_json) {
  return guard([&] {
    need(model, "model");
    need(info_json, "info_json");
    nlohmann::json j = {{"name", model->model.name()},
                        {"spec", revcal::to_json(model->model.spec())},
                        {"frozen", model->model.frozen()},
                        {"param_count", revcal::count_params(model->model)}};
    if (model->model.quantization) {
      j["quantization"] = {{"bits", model->model.quantization->bits}, {"method", model->model.quantization->method}};
    }
    *info_json = dup(j.dump());
  });
}

revcal_status revcal_model_param_count(const revcal_model* model, size_t* out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    *out = revcal::count_params(model->model);
  });
}

revcal_status revcal_model_hash(const revcal_model* model, char** hex) {
  return guard([&] {
    need(model, "model");
    need(hex, "hex");
    *hex = dup(revcal::param_hash(model->model));
  });
}

revcal_status revcal_dataset_load(const char* path, const char* labels_path, revcal_dataset** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new revcal_dataset{labels_path ? revcal::load_idx(path, labels_path) : revcal::load_dataset(path)};
  });
}

revcal_status revcal_dataset_digits(size_t n, unsigned long long seed, revcal_dataset** out) {
  return guard([&] {
    need(out, "out");
    *out = new revcal_dataset{revcal::gen_digits(n, seed)};
  });
}

revcal_status revcal_dataset_save(const revcal_dataset* data, const char* path) {
  return guard([&] {
    need(data, "data");
    need(path, "path");
    revcal::save_dataset(data->data, path);
  });
}

void revcal_dataset_free(revcal_dataset* data) { delete data; }

revcal_status revcal_dataset_size(const revcal_dataset* data, size_t* out) {
  return guard([&] {
    need(data, "data");
    need(out, "out");
    *out = data->data.size();
  });
}

revcal_status revcal_dataset_hash(const revcal_dataset* data, char** hex) {
  return guard([&] {
    need(data, "data");
    need(hex, "hex");
    *hex = dup(data->data.content_hash());
  });
}

revcal_status revcal_evaluate(const revcal_model* main, const revcal_dataset* data, const char* scenario,
                              unsigned long long seed, const revcal_model* calibrater, const char* merge_mode,
                              size_t threads, double* accuracy) {
  return guard([&] {
    need(main, "main");
    need(data, "data");
    need(accuracy, "accuracy");
    const auto s = revcal::named_scenario(scenario ? scenario : "identity");
    const auto mode = revcal::parse_merge_mode(merge_mode ? merge_mode : "multiplicative");
    const auto range = main->model.spec().input_shape.size() == 3 ? revcal::InputRange{} : revcal::InputRange::unbounded();
    *accuracy = revcal::evaluate(main->model, data->data, s, seed, calibrater ? &calibrater->model : nullptr, mode, range,
                                 threads ? threads : 1)
                    .accuracy;
  });
}

}  // extern "C"
