#include "trida/taxonomy.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "trida/errors.hpp"
#include "trida/kvfile.hpp"

namespace trida {

int Taxonomy::intern(const std::string& id) {
  auto it = index_.find(id);
  if (it != index_.end()) return it->second;
  const int node = static_cast<int>(names_.size());
  names_.push_back(id);
  index_.emplace(id, node);
  adjacency_.emplace_back();
  return node;
}

Taxonomy Taxonomy::from_edges(std::span<const Edge> edges, std::span<const std::string> extra_nodes) {
  Taxonomy tax;
  for (const auto& id : extra_nodes) tax.intern(id);
  for (const auto& [parent, child] : edges) {
    const int p = tax.intern(parent);
    const int c = tax.intern(child);
    if (p == c) continue;
    auto& np = tax.adjacency_[static_cast<std::size_t>(p)];
    if (std::find(np.begin(), np.end(), c) != np.end()) continue;
    np.push_back(c);
    tax.adjacency_[static_cast<std::size_t>(c)].push_back(p);
    ++tax.edge_count_;
  }
  if (tax.names_.empty()) throw ValidationError("taxonomy has no nodes");

  const int first = 0;
  const std::vector<int> dist = tax.distances_from(std::span<const int>(&first, 1));
  std::vector<int> seen(dist.size(), 0);
  std::vector<std::string> orphans;
  for (std::size_t n = 0; n < dist.size(); ++n) {
    if (dist[n] >= 0 || seen[n]) continue;
    // one representative per unreachable component
    const int rep = static_cast<int>(n);
    orphans.push_back(tax.names_[n]);
    const std::vector<int> comp = tax.distances_from(std::span<const int>(&rep, 1));
    for (std::size_t m = 0; m < comp.size(); ++m) {
      if (comp[m] >= 0) seen[m] = 1;
    }
  }
  if (!orphans.empty()) {
    std::string list;
    for (std::size_t i = 0; i < orphans.size() && i < 20; ++i) list += (i ? ", " : "") + orphans[i];
    if (orphans.size() > 20) list += ", ...";
    throw ValidationError("taxonomy is disconnected: " + std::to_string(orphans.size()) +
                          " component(s) unreachable from '" + tax.names_[0] + "' (containing " + list + ")");
  }
  return tax;
}

Taxonomy Taxonomy::parse(std::istream& in) {
  std::vector<Edge> edges;
  std::vector<std::string> declared;
  std::set<std::string> declared_set;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string t; fields >> t;) tokens.push_back(t);
    if (tokens.empty()) continue;
    if (tokens[0] == "node") {
      if (tokens.size() != 2) throw ParseError("expected 'node <id>'", number);
      declared.push_back(tokens[1]);
      declared_set.insert(tokens[1]);
      continue;
    }
    if (tokens.size() != 2) throw ParseError("expected 'parent child', got " + std::to_string(tokens.size()) + " fields", number);
    if (!declared_set.empty()) {
      for (const auto& t : tokens) {
        if (!declared_set.count(t)) throw ParseError("unknown node '" + t + "'", number);
      }
    }
    edges.emplace_back(tokens[0], tokens[1]);
  }
  return from_edges(edges, declared);
}

Taxonomy Taxonomy::load(const std::filesystem::path& edge_file) {
  std::ifstream in(edge_file);
  if (!in) throw IoError("cannot open taxonomy file " + edge_file.string());
  return parse(in);
}

Taxonomy Taxonomy::builtin_toy() {
  std::vector<Edge> edges = {{"shape", "round"}, {"shape", "polygon"}, {"shape", "stroke"}};
  for (const ToyShape& s : toy_shape_catalog()) edges.emplace_back(s.parent, s.name);
  return from_edges(edges);
}

Taxonomy Taxonomy::load_source(const std::string& source) {
  if (source == "builtin:toy") return builtin_toy();
  return load(source);
}

void Taxonomy::map_class(const std::string& class_id, const std::string& node_id) {
  auto node = find(node_id);
  if (!node) throw LookupError("class '" + class_id + "' maps to unknown node '" + node_id + "'");
  auto& nodes = class_nodes_[class_id];
  if (std::find(nodes.begin(), nodes.end(), *node) == nodes.end()) nodes.push_back(*node);
}

void Taxonomy::parse_class_mapping(std::istream& in) {
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string t; fields >> t;) tokens.push_back(t);
    if (tokens.empty()) continue;
    if (tokens.size() != 2) throw ParseError("expected 'class_id synset_id'", number);
    if (!find(tokens[1])) throw ParseError("unknown synset '" + tokens[1] + "' for class '" + tokens[0] + "'", number);
    map_class(tokens[0], tokens[1]);
  }
}

void Taxonomy::load_class_mapping(const std::filesystem::path& mapping_file) {
  std::ifstream in(mapping_file);
  if (!in) throw IoError("cannot open class mapping " + mapping_file.string());
  parse_class_mapping(in);
}

std::optional<int> Taxonomy::find(const std::string& node_id) const {
  auto it = index_.find(node_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> Taxonomy::resolve(const std::string& class_id) const {
  auto it = class_nodes_.find(class_id);
  if (it != class_nodes_.end()) return it->second;
  if (auto node = find(class_id)) return {*node};
  throw LookupError("class '" + class_id + "' does not resolve to any taxonomy node");
}

std::vector<int> Taxonomy::distances_from(std::span<const int> sources) const {
  std::vector<int> dist(names_.size(), -1);
  std::deque<int> queue;
  for (int s : sources) {
    if (dist[static_cast<std::size_t>(s)] != 0) {
      dist[static_cast<std::size_t>(s)] = 0;
      queue.push_back(s);
    }
  }
  while (!queue.empty()) {
    const int n = queue.front();
    queue.pop_front();
    for (int m : adjacency_[static_cast<std::size_t>(n)]) {
      if (dist[static_cast<std::size_t>(m)] < 0) {
        dist[static_cast<std::size_t>(m)] = dist[static_cast<std::size_t>(n)] + 1;
        queue.push_back(m);
      }
    }
  }
  return dist;
}

namespace {

double similarity_from(const std::vector<int>& dist, const std::vector<int>& nodes) {
  int best = std::numeric_limits<int>::max();
  for (int n : nodes) {
    const int d = dist[static_cast<std::size_t>(n)];
    if (d >= 0) best = std::min(best, d);
  }
  return best == std::numeric_limits<int>::max() ? 0.0 : 1.0 / (1.0 + best);
}

}  // namespace

double path_similarity(const Taxonomy& tax, const std::string& a, const std::string& b) {
  const std::vector<int> na = tax.resolve(a);
  const std::vector<int> nb = tax.resolve(b);
  return similarity_from(tax.distances_from(na), nb);
}

SelectionResult select_pretrain_classes(const Taxonomy& tax, std::span<const std::string> pretrain_classes,
                                        std::span<const std::string> target_classes, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw ValidationError("tau must lie in [0, 1), got " + format_double(tau));
  SelectionResult result;
  result.tau = tau;

  std::vector<std::vector<int>> pretrain_nodes;
  pretrain_nodes.reserve(pretrain_classes.size());
  for (const auto& c : pretrain_classes) pretrain_nodes.push_back(tax.resolve(c));

  for (const auto& t : target_classes) {
    const std::vector<int> dist = tax.distances_from(tax.resolve(t));
    for (std::size_t i = 0; i < pretrain_classes.size(); ++i) {
      const double s = similarity_from(dist, pretrain_nodes[i]);
      auto [it, inserted] = result.best_match.try_emplace(pretrain_classes[i], ClassMatch{t, s});
      if (!inserted && s > it->second.score) it->second = {t, s};
    }
  }

  for (const auto& [cls, match] : result.best_match) {
    if (match.score > tau) result.selected.push_back(cls);
  }
  std::sort(result.selected.begin(), result.selected.end(), [&](const std::string& a, const std::string& b) {
    const double sa = result.best_match.at(a).score, sb = result.best_match.at(b).score;
    if (sa != sb) return sa > sb;
    return a < b;
  });
  if (result.selected.empty()) {
    spdlog::warn("class selection at tau={} kept no pre-training classes", tau);
  }
  return result;
}

void write_selection_csv(const SelectionResult& result, std::ostream& out) {
  out << "class,best_match,score,selected\n";
  std::set<std::string> chosen(result.selected.begin(), result.selected.end());
  for (const auto& cls : result.selected) {
    const ClassMatch& m = result.best_match.at(cls);
    out << cls << ',' << m.target_class << ',' << format_double(m.score) << ",1\n";
  }
  for (const auto& [cls, m] : result.best_match) {
    if (chosen.count(cls)) continue;
    out << cls << ',' << m.target_class << ',' << format_double(m.score) << ",0\n";
  }
}

LabeledDataset build_pretrain_subset(const LabeledDataset& dataset, const SelectionResult& selection,
                                     std::optional<int> per_class_cap) {
  if (per_class_cap && *per_class_cap < 0) throw ValidationError("per_class_cap must be non-negative");
  const auto& classes = dataset.class_set();
  std::vector<int> remap(classes.size(), -1);
  for (std::size_t s = 0; s < selection.selected.size(); ++s) {
    auto it = std::find(classes.begin(), classes.end(), selection.selected[s]);
    if (it == classes.end()) {
      throw ValidationError("selected class '" + selection.selected[s] + "' is not in the dataset's class set");
    }
    remap[static_cast<std::size_t>(it - classes.begin())] = static_cast<int>(s);
  }
  const std::vector<int> truth = dataset.ground_truth();
  if (truth.size() != dataset.size()) throw ValidationError("build_pretrain_subset needs a labelled dataset");

  std::vector<int> taken(selection.selected.size(), 0);
  std::vector<Sample> samples;
  std::vector<int> hidden;
  const bool hidden_only = !dataset.labeled();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int mapped = remap[static_cast<std::size_t>(truth[i])];
    if (mapped < 0) continue;
    if (per_class_cap && taken[static_cast<std::size_t>(mapped)] >= *per_class_cap) continue;
    ++taken[static_cast<std::size_t>(mapped)];
    Sample s = dataset[i];
    if (hidden_only) {
      hidden.push_back(mapped);
    } else {
      s.label = mapped;
    }
    samples.push_back(std::move(s));
  }
  return LabeledDataset(dataset.role(), selection.selected, std::move(samples), std::move(hidden));
}

}  // namespace trida
