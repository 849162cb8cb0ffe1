#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trida/data.hpp"

namespace trida {

/// Undirected graph over class/synset identifiers, built from
/// parent-child links. Queries treat the hierarchy as a plain graph.
class Taxonomy {
 public:
  using Edge = std::pair<std::string, std::string>;

  /// Builds and checks connectivity. Throws ValidationError naming the
  /// components not reachable from the first node.
  static Taxonomy from_edges(std::span<const Edge> edges, std::span<const std::string> extra_nodes = {});

  /// Edge-list file: one "parent child" pair per line; `#` comments.
  /// Optional "node <id>" lines declare nodes up front; once any node is
  /// declared, edges naming undeclared nodes are parse errors.
  static Taxonomy load(const std::filesystem::path& edge_file);
  static Taxonomy parse(std::istream& in);

  /// Shape taxonomy used by the toy benchmark:
  /// shape -> {round, polygon, stroke} -> toy shapes.
  static Taxonomy builtin_toy();

  /// "builtin:toy" or a path to an edge list.
  static Taxonomy load_source(const std::string& source);

  /// "class_id synset_id" lines; a class may map to several synsets.
  void load_class_mapping(const std::filesystem::path& mapping_file);
  void parse_class_mapping(std::istream& in);
  void map_class(const std::string& class_id, const std::string& node_id);

  std::size_t node_count() const { return names_.size(); }
  std::size_t edge_count() const { return edge_count_; }
  std::optional<int> find(const std::string& node_id) const;
  const std::string& name(int node) const { return names_[static_cast<std::size_t>(node)]; }
  const std::vector<int>& neighbors(int node) const { return adjacency_[static_cast<std::size_t>(node)]; }

  /// Nodes a class identifier stands for: its mapped synsets, or the node
  /// of the same name. Throws LookupError when neither exists.
  std::vector<int> resolve(const std::string& class_id) const;

  /// Unweighted shortest-path lengths from a set of nodes to every node.
  std::vector<int> distances_from(std::span<const int> sources) const;

 private:
  int intern(const std::string& id);

  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::vector<int>> adjacency_;
  std::size_t edge_count_ = 0;
  std::map<std::string, std::vector<int>> class_nodes_;
};

/// 1 / (1 + d), d the shortest-path length; for multi-synset classes the
/// maximum over synset pairs.
double path_similarity(const Taxonomy& tax, const std::string& a, const std::string& b);

struct ClassMatch {
  std::string target_class;
  double score = 0.0;
};

struct SelectionResult {
  std::vector<std::string> selected;               // descending score, then identifier
  std::map<std::string, ClassMatch> best_match;    // every pre-training class considered
  double tau = 0.0;

  bool empty() const { return selected.empty(); }
};

/// Keeps pre-training classes whose best similarity to any target class
/// is strictly greater than tau.
SelectionResult select_pretrain_classes(const Taxonomy& tax, std::span<const std::string> pretrain_classes,
                                        std::span<const std::string> target_classes, double tau);

/// CSV with header "class,best_match,score,selected".
void write_selection_csv(const SelectionResult& result, std::ostream& out);

/// Filters to the selected classes, at most per_class_cap samples each
/// (first in dataset order), relabelled 0..|selected|-1 in selection order.
LabeledDataset build_pretrain_subset(const LabeledDataset& dataset, const SelectionResult& selection,
                                     std::optional<int> per_class_cap = std::nullopt);

}  // namespace trida
