#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>
#include <vector>

#include "CLI11.hpp"
#include "lenc/error.hpp"
#include "lenc/harness.hpp"

namespace {

// LENC_LOG=quiet|info (default info).
bool verbose() {
  const char* v = std::getenv("LENC_LOG");
  return !v || std::string_view(v) != "quiet";
}

void log(const std::string& msg) {
  if (verbose()) std::cerr << "lenc: " << msg << '\n';
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto pos = text.find(',', start);
    const std::string item = text.substr(start, pos == std::string::npos ? pos : pos - start);
    if (!item.empty()) {
      std::size_t used = 0;
      T v{};
      if constexpr (std::is_floating_point_v<T>) {
        v = std::stod(item, &used);
      } else {
        v = static_cast<T>(std::stoull(item, &used));
      }
      if (used != item.size()) throw lenc::ConfigError("bad list item '" + item + "'");
      out.push_back(v);
    }
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (out.empty()) throw lenc::ConfigError("empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LENC community simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, in_dir, axis, values, seeds;
  std::size_t threads = 1;

  auto* run = app.add_subcommand("run", "run one experiment");
  run->add_option("--config", config_path, "experiment config file")->required();
  run->add_option("--out", out_dir, "output directory")->required();

  auto* sw = app.add_subcommand("sweep", "repeat an experiment over one axis and several seeds");
  sw->add_option("--config", config_path, "experiment config file")->required();
  sw->add_option("--axis", axis, "stream_size | lambda | node_count | cycle_count")->required();
  sw->add_option("--values", values, "comma-separated axis values")->required();
  sw->add_option("--seeds", seeds, "comma-separated seeds")->required();
  sw->add_option("--out", out_dir, "output directory")->required();
  sw->add_option("--threads", threads, "parallel runs")->check(CLI::PositiveNumber);

  auto* rep = app.add_subcommand("report", "summarize a run or sweep directory");
  rep->add_option("--in", in_dir, "run or sweep output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = lenc::load_config(config_path);
      log("running " + std::to_string(cfg.schedule.size()) + " cycles, " +
          std::to_string(cfg.nodes.size()) + " nodes");
      const auto result = lenc::run_experiment(cfg);
      lenc::write_outputs(result, out_dir);
      for (const auto& e : result.errors) log("error: " + e);
      log("wrote " + out_dir);
    } else if (*sw) {
      const auto cfg = lenc::load_config(config_path);
      const auto ax = lenc::parse_sweep_axis(axis);
      const auto result =
          lenc::sweep(cfg, ax, parse_list<double>(values), parse_list<std::uint64_t>(seeds), threads);
      lenc::write_sweep(result, out_dir);
      log("wrote " + out_dir);
    } else if (*rep) {
      std::cout << lenc::report(in_dir);
    }
  } catch (const lenc::Error& e) {
    std::cerr << "lenc: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "lenc: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
