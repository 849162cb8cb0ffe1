// Command-line front end for the TriDA toolkit.
//
// Configuration precedence, lowest first: built-in defaults, --config file,
// TRIDA_* environment variables, --set KEY=VALUE, per-key flags.

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trida/errors.hpp"
#include "trida/harness.hpp"
#include "trida/hash.hpp"

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> assignments;
  std::map<std::string, std::string> flags;
  int repeats = 1;
};

void add_config_options(CLI::App& app, ConfigOptions& opts, bool with_repeats) {
  app.add_option("--config", opts.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", opts.assignments, "KEY=VALUE override (repeatable)");
  if (with_repeats) {
    app.add_option("--repeats", opts.repeats, "run seeds seed, seed+1, ... and average")->check(CLI::PositiveNumber);
  }
  for (const auto& key : trida::RunConfig::keys()) {
    if (key == "recipe") continue;
    app.add_option_function<std::string>(
           "--" + key, [&opts, key](const std::string& v) { opts.flags[key] = v; }, "config key " + key)
        ->group("Config keys");
  }
}

trida::RunConfig build_config(const ConfigOptions& opts, trida::Recipe recipe) {
  trida::RunConfig cfg;
  if (!opts.config_file.empty()) cfg.apply(trida::KeyValueFile::read(opts.config_file));
  cfg.apply_environment();
  for (const auto& a : opts.assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw trida::ValidationError("--set expects KEY=VALUE, got '" + a + "'");
    cfg.set(trida::trim(a.substr(0, eq)), a.substr(eq + 1));
  }
  for (const auto& [k, v] : opts.flags) cfg.set(k, v);
  cfg.recipe = recipe;
  cfg.validate();
  return cfg;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_report(const trida::RunReport& r) {
  std::cout << "run " << r.run_id << " (" << trida::to_string(r.recipe) << ", config " << r.config_hash << ")\n";
  if (!r.diagnostics.empty()) {
    std::cout << "epoch   w_st     w_sp     w_tp     silh     acc_s    acc_t\n";
    for (const auto& d : r.diagnostics) {
      std::printf("%5d  %7s  %7s  %7s  %7s  %7s  %7s\n", d.epoch, fmt(d.w_st).c_str(), fmt(d.w_sp).c_str(),
                  fmt(d.w_tp).c_str(), fmt(d.silhouette_pretrain).c_str(), fmt(d.acc_source).c_str(),
                  fmt(d.acc_target).c_str());
    }
    std::fflush(stdout);
  }
  for (const auto& [k, v] : r.final_accuracy) std::cout << "final accuracy " << k << ": " << fmt(v) << "\n";
  for (const auto& [k, v] : r.metrics) std::cout << k << ": " << fmt(v) << "\n";
  for (const auto& [k, v] : r.artifacts) std::cout << k << ": " << v << "\n";
  std::cout << "report hash " << trida::hex_digest(r.hash()) << ", " << fmt(r.wall_clock_seconds) << " s\n";
}

int run_recipe(const ConfigOptions& opts, trida::Recipe recipe) {
  const trida::RunConfig cfg = build_config(opts, recipe);
  const auto reports = trida::run_repeats(cfg, opts.repeats);
  std::map<std::string, std::vector<double>> finals;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    trida::RunConfig snapshot = cfg;
    snapshot.seed = cfg.seed + i;
    snapshot.run_id = reports[i].run_id;
    trida::export_report(reports[i], cfg.output_dir, &snapshot);
    print_report(reports[i]);
    for (const auto& [k, v] : reports[i].final_accuracy) finals[k].push_back(v);
  }
  if (reports.size() > 1) {
    for (const auto& [k, values] : finals) {
      const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
      double var = 0.0;
      for (double v : values) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(values.size()));
      std::cout << "mean final accuracy " << k << " over " << values.size() << " seeds: " << fmt(mean) << " +- "
                << fmt(sd) << "\n";
    }
  }
  return 0;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw trida::IoError("cannot open " + path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trida::trim(line);
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

struct SelectOptions {
  std::string taxonomy = "builtin:toy";
  std::vector<std::string> mappings;
  std::string pretrain_classes;
  std::string target_classes;
  double tau = 0.2;
  int expect = -1;
  int tolerance = 5;
  std::string csv;
};

int run_select(const SelectOptions& o) {
  trida::Taxonomy tax = trida::Taxonomy::load_source(o.taxonomy);
  for (const auto& m : o.mappings) tax.load_class_mapping(m);
  std::vector<std::string> pretrain, target;
  if (o.pretrain_classes.empty() || o.target_classes.empty()) {
    if (o.taxonomy != "builtin:toy") {
      throw trida::ValidationError("--pretrain-classes and --target-classes are required for a custom taxonomy");
    }
    const trida::ToyBenchmarkSpec spec;
    const auto catalog = trida::toy_shape_catalog();
    for (int i = 0; i < spec.n_classes_pretrain; ++i) pretrain.push_back(catalog[static_cast<std::size_t>(i)].name);
    for (int i = 0; i < spec.n_classes_task; ++i) target.push_back(catalog[static_cast<std::size_t>(i)].name);
  }
  if (!o.pretrain_classes.empty()) pretrain = read_lines(o.pretrain_classes);
  if (!o.target_classes.empty()) target = read_lines(o.target_classes);
  const trida::SelectionResult sel = trida::select_pretrain_classes(tax, pretrain, target, o.tau);
  if (!o.csv.empty()) {
    std::ofstream out(o.csv);
    if (!out) throw trida::IoError("cannot write " + o.csv);
    trida::write_selection_csv(sel, out);
  }
  std::cout << "tau " << trida::format_double(o.tau) << ": selected " << sel.selected.size() << " of "
            << pretrain.size() << " pre-training classes for " << target.size() << " target classes\n";
  if (o.expect >= 0) {
    const long diff = static_cast<long>(sel.selected.size()) - o.expect;
    std::cout << "expected " << o.expect << ", difference " << diff
              << (diff == 0 ? " (exact)" : std::labs(diff) <= o.tolerance ? " (within tolerance)" : " (outside tolerance)")
              << "\n";
    if (std::labs(diff) > o.tolerance) return kExitRuntime;
  }
  return 0;
}

// Aggregates summary_<id>.txt files of a run directory into one table.
int run_report(const std::string& dir, const std::string& csv_path) {
  std::vector<std::filesystem::path> summaries;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("summary_", 0) == 0 && entry.path().extension() == ".txt") summaries.push_back(entry.path());
  }
  if (summaries.empty()) throw trida::ValidationError("no summary_*.txt files in " + dir);
  std::sort(summaries.begin(), summaries.end());
  std::vector<std::string> columns;
  std::vector<trida::KeyValueFile> rows;
  for (const auto& p : summaries) {
    rows.push_back(trida::KeyValueFile::read(p));
    for (const auto& k : rows.back().keys()) {
      if (k.rfind("final_accuracy.", 0) == 0 || k.rfind("metric.", 0) == 0) {
        if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
      }
    }
  }
  std::ofstream file;
  if (!csv_path.empty()) {
    file.open(csv_path);
    if (!file) throw trida::IoError("cannot write " + csv_path);
  }
  std::ostream& out = csv_path.empty() ? std::cout : file;
  out << "run_id,recipe,report_hash";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (const auto& row : rows) {
    out << row.get_or("run_id", "") << ',' << row.get_or("recipe", "") << ',' << row.get_or("report_hash", "");
    for (const auto& c : columns) out << ',' << row.get_or(c, "");
    out << '\n';
  }
  if (!csv_path.empty()) std::cout << "wrote " << rows.size() << " rows to " << csv_path << "\n";
  return 0;
}

int run_toy(const ConfigOptions& opts, const std::string& dir) {
  const trida::RunConfig cfg = build_config(opts, trida::Recipe::pretrain);
  const trida::ToyBenchmark bench = trida::generate_toy_benchmark(cfg.toy);
  trida::save_toy_benchmark(bench, cfg.toy, dir);
  std::cout << "wrote toy benchmark (" << bench.source.size() << " source, " << bench.target.size() << " target, "
            << bench.pretrain.size() << " pre-training images) to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TriDA three-domain adaptation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  struct Recipe {
    const char* name;
    const char* help;
    trida::Recipe recipe;
  };
  const std::vector<Recipe> recipes = {
      {"pretrain", "train the stand-in pre-trained backbone on the pre-training domain", trida::Recipe::pretrain},
      {"uda", "vanilla UDA with optional TriDA terms", trida::Recipe::uda},
      {"sfuda1", "source-free step 1: fine-tune on source (+ L_p)", trida::Recipe::sfuda_step1},
      {"sfuda2", "source-free step 2: adapt a step-1 checkpoint to the target", trida::Recipe::sfuda_step2},
      {"probe", "noisy-label degeneration probe", trida::Recipe::noisy_probe},
      {"synth", "synthesize pre-training proxy images by model inversion", trida::Recipe::synthesize},
  };
  std::vector<ConfigOptions> recipe_opts(recipes.size());
  std::vector<CLI::App*> recipe_apps;
  for (std::size_t i = 0; i < recipes.size(); ++i) {
    CLI::App* sub = app.add_subcommand(recipes[i].name, recipes[i].help);
    add_config_options(*sub, recipe_opts[i], true);
    recipe_apps.push_back(sub);
  }

  SelectOptions select;
  CLI::App* select_app = app.add_subcommand("select", "report taxonomy-based pre-training class selection");
  select_app->add_option("--taxonomy", select.taxonomy, "edge file or builtin:toy");
  select_app->add_option("--class-mapping", select.mappings, "class_id synset_id file (repeatable)");
  select_app->add_option("--pretrain-classes", select.pretrain_classes, "one pre-training class per line");
  select_app->add_option("--target-classes", select.target_classes, "one target class per line");
  select_app->add_option("--tau", select.tau, "similarity threshold")->check(CLI::Range(0.0, 1.0));
  select_app->add_option("--expect", select.expect, "expected selection count to compare against");
  select_app->add_option("--tolerance", select.tolerance, "accepted absolute difference from --expect");
  select_app->add_option("--csv", select.csv, "write per-class scores");

  std::string report_dir, report_csv;
  CLI::App* report_app = app.add_subcommand("report", "tabulate the summaries in a run directory");
  report_app->add_option("dir", report_dir, "run output directory")->required()->check(CLI::ExistingDirectory);
  report_app->add_option("--csv", report_csv, "write the table here instead of stdout");

  ConfigOptions toy_opts;
  std::string toy_dir;
  CLI::App* toy_app = app.add_subcommand("toy", "write the toy benchmark as image folders");
  toy_app->add_option("dir", toy_dir, "output directory")->required();
  add_config_options(*toy_app, toy_opts, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    for (std::size_t i = 0; i < recipes.size(); ++i) {
      if (recipe_apps[i]->parsed()) return run_recipe(recipe_opts[i], recipes[i].recipe);
    }
    if (select_app->parsed()) return run_select(select);
    if (report_app->parsed()) return run_report(report_dir, report_csv);
    if (toy_app->parsed()) return run_toy(toy_opts, toy_dir);
  } catch (const trida::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const trida::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
