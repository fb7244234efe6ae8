#pragma once

#include <set>
#include <string>
#include <vector>

#include "lgcaps/tensor.hpp"

// Dependency-parse handling: tree validation, leaf pruning, the per-level
// merge plan ("layout"), and the word-compatibility matrices derived from it.
//
// Word indices are positions in the original question and never shift when
// tokens are pruned: pruned tokens stay in the token list, flagged, so the
// compatibility matrices keep one row per question position.

namespace lgcaps {

inline constexpr int kNoHead = -1;

struct Token {
  int index = 0;
  std::string text;
  std::string pos;
  int head = kNoHead;
  bool pruned = false;  // runtime mark, not part of the file format
};

struct ParseTree {
  std::string id;
  std::vector<Token> tokens;
  int n_q() const { return static_cast<int>(tokens.size()); }
};

// Throws ParseError naming the offending token on cycles, missing/multiple
// roots, out-of-range heads, or index gaps.
void validate_tree(const ParseTree& tree);

// Level of each kept node: distance to its furthest kept leaf (leaves are 0).
// Pruned tokens get level -1. The tree must already be validated.
std::vector<int> node_levels(const ParseTree& tree);

// Marks original leaves whose POS is outside keep_pos as pruned. Nodes that
// become leaves because their children were pruned are not re-pruned.
// Throws if nothing would remain.
ParseTree prune_leaves(const ParseTree& tree, const std::set<std::string>& keep_pos);

struct LinguisticLayout {
  int n_q = 0;
  int H = 0;  // levels run 0..H
  // groups[l] = word-index groups at level l, each sorted ascending.
  std::vector<std::vector<std::vector<int>>> groups;
};

// Level 0 holds every kept word as a singleton; level l >= 1 holds the kept
// word set of the subtree under each exactly-level-l node. Trees taller than
// H_max collapse everything from level H_max upward into the root group.
LinguisticLayout build_layout(const ParseTree& tree, int H_max);

// Word-compatibility matrix at one level: +1 same group, -1 distinct groups,
// 0 when either word is in no group at this level. Shape [n_q, n_q].
Tensor correlation_matrix(const LinguisticLayout& layout, int level);

struct AlignedLayout {
  LinguisticLayout layout;   // indices shifted, levels extended to H_target
  std::vector<Token> tokens; // length n_q_max; left padding has empty text/pos
  int shift = 0;             // n_q_max - n_q
};

// Right-aligns the question inside n_q_max slots and bottom-aligns the
// layout: missing levels up to H_target replicate the root group so shallow
// questions still reach the top layer.
AlignedLayout pad_align(const LinguisticLayout& layout, const ParseTree& tree, int n_q_max,
                        int H_target);

// Structural sanity: disjoint groups within a level, and every upper-level
// group laminar over the level below (each lower group wholly inside or
// disjoint, uncovered words acting as implicit singletons).
bool layout_consistent(const LinguisticLayout& layout);

// ---- parse-tree file format ----
// One question per line: {"id":..,"tokens":[{"index":..,"text":..,"pos":..,
// "head":..},..]}, head -1 for the root. Serialization is canonical, so
// load -> save -> load is byte-identical.

ParseTree tree_from_json_line(const std::string& line);
std::string tree_to_json_line(const ParseTree& tree);

std::vector<ParseTree> load_parse_trees(const std::string& path);
void save_parse_trees(const std::string& path, const std::vector<ParseTree>& trees);

}  // namespace lgcaps
