#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "support/test_support.hpp"
#include "trida/errors.hpp"
#include "trida/taxonomy.hpp"

using namespace trida;

namespace {

constexpr int kInf = std::numeric_limits<int>::max() / 4;

/// Random connected tree plus a few chords, as an edge list.
std::vector<Taxonomy::Edge> random_graph(int n, int chords, std::mt19937_64& rng) {
  std::vector<Taxonomy::Edge> edges;
  for (int i = 1; i < n; ++i) {
    std::uniform_int_distribution<int> parent(0, i - 1);
    edges.emplace_back("v" + std::to_string(parent(rng)), "v" + std::to_string(i));
  }
  std::uniform_int_distribution<int> any(0, n - 1);
  for (int c = 0; c < chords; ++c) {
    const int a = any(rng), b = any(rng);
    if (a != b) edges.emplace_back("v" + std::to_string(a), "v" + std::to_string(b));
  }
  return edges;
}

std::vector<std::vector<int>> floyd_warshall(int n, const std::vector<Taxonomy::Edge>& edges) {
  std::vector<std::vector<int>> d(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(n), kInf));
  for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 0;
  for (const auto& [a, b] : edges) {
    const auto i = static_cast<std::size_t>(std::stoi(a.substr(1)));
    const auto j = static_cast<std::size_t>(std::stoi(b.substr(1)));
    d[i][j] = d[j][i] = 1;
  }
  for (std::size_t k = 0; k < d.size(); ++k)
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t j = 0; j < d.size(); ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
  return d;
}

std::filesystem::path wordnet_dir() { return std::filesystem::path(TRIDA_SOURCE_DIR) / "data" / "wordnet"; }

std::vector<std::string> read_lines(const std::filesystem::path& file) {
  std::ifstream in(file);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("builtin toy taxonomy similarities") {
  const auto tax = Taxonomy::builtin_toy();
  CHECK(path_similarity(tax, "circle", "circle") == 1.0);
  // Siblings under one parent: d = 2.
  CHECK(path_similarity(tax, "circle", "ring") == doctest::Approx(1.0 / 3.0));
  // Different branches: up two, down two.
  CHECK(path_similarity(tax, "circle", "square") == doctest::Approx(1.0 / 5.0));
  CHECK(path_similarity(tax, "square", "circle") == path_similarity(tax, "circle", "square"));
  CHECK_THROWS_AS(path_similarity(tax, "circle", "unicorn"), LookupError);
}

TEST_CASE("toy selection at the two thresholds") {
  const auto tax = Taxonomy::builtin_toy();
  std::vector<std::string> pretrain, target;
  for (const auto& s : toy_shape_catalog()) pretrain.push_back(s.name);
  pretrain.resize(8);
  target.assign(pretrain.begin(), pretrain.begin() + 4);

  // Every toy shape shares a root with every target at distance 4.
  const auto loose = select_pretrain_classes(tax, pretrain, target, 0.0);
  CHECK(loose.selected.size() == 8);
  // Non-task classes all have a same-parent sibling among the targets (1/3 > 0.2).
  const auto at_02 = select_pretrain_classes(tax, pretrain, target, 0.2);
  CHECK(at_02.selected.size() == 8);
  // Only exact matches (score 1) clear 1/3 < 0.4.
  const auto at_04 = select_pretrain_classes(tax, pretrain, target, 0.4);
  CHECK(at_04.selected.size() == 4);
  for (const auto& name : at_04.selected) CHECK(at_04.best_match.at(name).score == 1.0);
  CHECK(at_04.best_match.size() == 8);

  // Strict comparison: tau exactly at a score excludes it.
  const auto at_third = select_pretrain_classes(tax, pretrain, target, 1.0 / 3.0);
  CHECK(at_third.selected.size() == 4);
  CHECK_THROWS_AS(select_pretrain_classes(tax, pretrain, target, 1.0), ValidationError);
  CHECK_THROWS_AS(select_pretrain_classes(tax, pretrain, target, -0.1), ValidationError);
}

TEST_CASE("shortest paths agree with Floyd-Warshall on random graphs") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + trial;
    const auto edges = random_graph(n, trial % 4, rng);
    const auto tax = Taxonomy::from_edges(edges);
    const auto oracle = floyd_warshall(n, edges);
    for (int i = 0; i < n; ++i) {
      const auto name_i = "v" + std::to_string(i);
      const int src = *tax.find(name_i);
      const auto dist = tax.distances_from(std::vector<int>{src});
      for (int j = 0; j < n; ++j) {
        const int node_j = *tax.find("v" + std::to_string(j));
        CHECK(dist[static_cast<std::size_t>(node_j)] == oracle[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
        CHECK(path_similarity(tax, name_i, "v" + std::to_string(j)) ==
              doctest::Approx(1.0 / (1.0 + oracle[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)])));
      }
    }
  }
}

TEST_CASE("multi-synset classes take the best synset pair") {
  const std::vector<Taxonomy::Edge> edges{{"r", "a"}, {"a", "b"}, {"b", "c"}, {"r", "x"}, {"x", "y"}};
  auto tax = Taxonomy::from_edges(edges);
  tax.map_class("far", "c");
  CHECK(path_similarity(tax, "far", "y") == doctest::Approx(1.0 / 6.0));
  tax.map_class("far", "x");
  CHECK(path_similarity(tax, "far", "y") == doctest::Approx(0.5));
  CHECK_THROWS_AS(tax.map_class("far", "nowhere"), LookupError);
}

TEST_CASE("selection is monotone in tau") {
  std::mt19937_64 rng(77);
  const auto edges = random_graph(40, 6, rng);
  const auto tax = Taxonomy::from_edges(edges);
  std::vector<std::string> pretrain, target;
  for (int i = 0; i < 40; ++i) (i % 5 == 0 ? target : pretrain).push_back("v" + std::to_string(i));
  std::size_t previous = pretrain.size() + 1;
  for (double tau = 0.0; tau < 1.0; tau += 0.05) {
    const auto result = select_pretrain_classes(tax, pretrain, target, tau);
    CHECK(result.selected.size() <= previous);
    previous = result.selected.size();
    // Brute-force recomputation of the rule.
    for (const auto& p : pretrain) {
      double best = 0.0;
      for (const auto& t : target) best = std::max(best, path_similarity(tax, p, t));
      const bool in = std::find(result.selected.begin(), result.selected.end(), p) != result.selected.end();
      CHECK(in == (best > tau));
    }
    for (std::size_t i = 1; i < result.selected.size(); ++i)
      CHECK(result.best_match.at(result.selected[i - 1]).score >= result.best_match.at(result.selected[i]).score);
  }
}

TEST_CASE("edge list parsing and errors") {
  std::istringstream good("# comment\nroot a\nroot b  # trailing\n\nb c\n");
  const auto tax = Taxonomy::parse(good);
  CHECK(tax.node_count() == 4);
  CHECK(tax.edge_count() == 3);

  std::istringstream three_fields("root a\nroot b extra\n");
  try {
    Taxonomy::parse(three_fields);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }

  std::istringstream undeclared("node root\nnode a\nroot a\nroot ghost\n");
  try {
    Taxonomy::parse(undeclared);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 4);
    CHECK(std::string(e.what()).find("ghost") != std::string::npos);
  }

  std::istringstream disconnected("a b\nc d\n");
  CHECK_THROWS_AS(Taxonomy::parse(disconnected), ValidationError);
  CHECK_THROWS_AS(Taxonomy::load("/definitely/not/here.txt"), IoError);
}

TEST_CASE("class mapping parsing") {
  std::istringstream edges("r a\nr b\n");
  auto tax = Taxonomy::parse(edges);
  std::istringstream mapping("Thing a  # sense\nThing b\n");
  tax.parse_class_mapping(mapping);
  CHECK(tax.resolve("Thing").size() == 2);
  std::istringstream bad("Other zzz\n");
  CHECK_THROWS_AS(tax.parse_class_mapping(bad), ParseError);
}

TEST_CASE("selection csv and subset construction") {
  const auto tax = Taxonomy::builtin_toy();
  ToyBenchmarkSpec spec;
  spec.image_side = 8;
  spec.samples_per_class_per_domain = 3;
  const auto bench = generate_toy_benchmark(spec);
  const auto result = select_pretrain_classes(tax, bench.pretrain.class_set(), bench.target.class_set(), 0.4);
  std::ostringstream csv;
  write_selection_csv(result, csv);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header == "class,best_match,score,selected");
  int rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  CHECK(rows == 8);

  const auto subset = build_pretrain_subset(bench.pretrain, result, 2);
  CHECK(subset.num_classes() == 4);
  CHECK(subset.size() == 8);
  CHECK(subset.class_set() == result.selected);
  for (const auto& s : subset.samples()) CHECK((*s.label >= 0 && *s.label < 4));
}

TEST_CASE("WordNet export: Telephone matches pay-phone and dial telephone") {
  const auto dir = wordnet_dir();
  if (!std::filesystem::exists(dir / "noun_hypernyms.txt")) {
    MESSAGE("data/wordnet not present; skipped");
    return;
  }
  auto tax = Taxonomy::load(dir / "noun_hypernyms.txt");
  tax.load_class_mapping(dir / "officehome_mapping.txt");
  const auto imagenet = read_lines(dir / "imagenet1k_classes.txt");
  CHECK(imagenet.size() == 1000);
  const std::vector<std::string> target{"Telephone"};
  const auto result = select_pretrain_classes(tax, imagenet, target, 0.4);
  REQUIRE(result.selected.size() >= 2);
  const std::vector<std::string> top2(result.selected.begin(), result.selected.begin() + 2);
  // Both are direct hyponyms of telephone.n.01 (d = 1); ties break by identifier.
  CHECK(top2 == std::vector<std::string>{"n03187595", "n03902125"});
  CHECK(result.best_match.at("n03902125").score == doctest::Approx(0.5));
}
