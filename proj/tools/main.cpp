#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "revcal.h"

namespace {

int run(const std::string& sub, const std::string& config_path, const nlohmann::json& overrides, bool quiet) {
  std::ifstream in(config_path, std::ios::binary);
  if (!in) {
    std::cerr << "revcal: cannot read config " << config_path << "\n";
    return REVCAL_ERR_IO;
  }
  std::stringstream text;
  text << in.rdbuf();
  char* manifest = nullptr;
  const revcal_status st = revcal_run(sub.c_str(), text.str().c_str(), overrides.dump().c_str(), &manifest);
  if (st != REVCAL_OK) {
    std::cerr << "revcal " << sub << ": " << revcal_last_error() << "\n";
    return st;
  }
  const auto m = nlohmann::json::parse(manifest);
  revcal_free_string(manifest);
  if (!quiet) {
    std::cout << sub << " finished in " << m["duration_seconds"].get<double>() << " s, out "
              << m["config"]["out"].get<std::string>() << "\n";
    if (!m["results"].empty()) std::cout << m["results"].dump(2) << "\n";
  }
  return REVCAL_OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"revcal: calibraters for frozen classifiers"};
  app.set_version_flag("--version", revcal_version());
  app.require_subcommand(1);

  std::string config;
  long long seed = -1;
  long long threads = -1;
  std::string out;
  bool quiet = false;
  std::istringstream names(revcal_subcommands());
  for (std::string name; names >> name;) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "JSON config or manifest")->required();
    sub->add_option("--seed", seed, "base seed");
    sub->add_option("--threads", threads, "evaluation threads (1 = reproducible path)");
    sub->add_option("--out", out, "output directory");
    sub->add_flag("-q,--quiet", quiet, "print nothing on success");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : REVCAL_ERR_CONFIG;
  }
  nlohmann::json overrides = nlohmann::json::object();
  if (seed >= 0) overrides["seed"] = seed;
  if (threads >= 0) overrides["threads"] = threads;
  if (!out.empty()) overrides["out"] = out;
  const std::string sub = app.get_subcommands().front()->get_name();
  return run(sub, config, overrides, quiet);
}
