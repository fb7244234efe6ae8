#include "lgcaps/linglayout.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"

using lgcaps::LinguisticLayout;
using lgcaps::ParseTree;
using lgcaps::Tensor;
using lgcaps::Token;

namespace {

ParseTree make_tree(const std::string& id,
                    std::vector<std::tuple<std::string, std::string, int>> spec) {
  ParseTree t;
  t.id = id;
  int i = 0;
  for (auto& [text, pos, head] : spec) t.tokens.push_back(Token{i++, text, pos, head, false});
  return t;
}

// Question from the grouping walkthrough: "are there more gray things than
// tiny cylinders". Only "cylinders" sits at level 1.
ParseTree walkthrough_tree() {
  return make_tree("walkthrough", {
                                      {"are", "AUX", -1},        // 0
                                      {"there", "PRON", 0},      // 1
                                      {"more", "ADJ", 4},        // 2
                                      {"gray", "COLOR-ADJ", 4},  // 3
                                      {"things", "NOUN", 0},     // 4
                                      {"than", "ADP", 7},        // 5
                                      {"tiny", "ADJ", 7},        // 6
                                      {"cylinders", "NOUN", 4},  // 7
                                  });
}

// Independent longest-downward-path computation by repeated relaxation.
std::vector<int> levels_ref(const ParseTree& t) {
  const int n = t.n_q();
  std::vector<int> lv(n, 0);
  for (int pass = 0; pass < n; ++pass)
    for (const Token& tok : t.tokens)
      if (tok.head >= 0) lv[tok.head] = std::max(lv[tok.head], lv[tok.index] + 1);
  return lv;
}

ParseTree random_tree(std::mt19937_64& eng, int max_nodes) {
  std::uniform_int_distribution<int> size_d(1, max_nodes);
  const int n = size_d(eng);
  ParseTree t;
  t.id = "rand";
  for (int i = 0; i < n; ++i) {
    int head = -1;
    if (i > 0) head = std::uniform_int_distribution<int>(0, i - 1)(eng);
    t.tokens.push_back(Token{i, "w" + std::to_string(i), "NOUN", head, false});
  }
  return t;
}

}  // namespace

TEST_CASE("single-token tree validates and sits at level 0") {
  ParseTree t = make_tree("t", {{"cubes", "NOUN", -1}});
  lgcaps::validate_tree(t);
  CHECK(lgcaps::node_levels(t) == std::vector<int>{0});
}

TEST_CASE("malformed trees are rejected with the token index") {
  // head cycle 1 -> 2 -> 1
  ParseTree cyc = make_tree("c", {{"a", "NOUN", -1}, {"b", "NOUN", 2}, {"c", "NOUN", 1}});
  CHECK_THROWS_AS(lgcaps::validate_tree(cyc), lgcaps::ParseError);

  ParseTree two_roots = make_tree("r", {{"a", "NOUN", -1}, {"b", "NOUN", -1}});
  CHECK_THROWS_AS(lgcaps::validate_tree(two_roots), lgcaps::ParseError);

  ParseTree no_root = make_tree("n", {{"a", "NOUN", 1}, {"b", "NOUN", 0}});
  CHECK_THROWS_AS(lgcaps::validate_tree(no_root), lgcaps::ParseError);

  ParseTree bad_head = make_tree("h", {{"a", "NOUN", -1}, {"b", "NOUN", 9}});
  CHECK_THROWS_AS(lgcaps::validate_tree(bad_head), lgcaps::ParseError);

  ParseTree gap = make_tree("g", {{"a", "NOUN", -1}, {"b", "NOUN", 0}});
  gap.tokens[1].index = 3;
  CHECK_THROWS_AS(lgcaps::validate_tree(gap), lgcaps::ParseError);

  ParseTree self = make_tree("s", {{"a", "NOUN", -1}, {"b", "NOUN", 1}});
  CHECK_THROWS_AS(lgcaps::validate_tree(self), lgcaps::ParseError);

  try {
    lgcaps::validate_tree(bad_head);
  } catch (const lgcaps::ParseError& e) {
    CHECK(std::string(e.what()).find("token 1") != std::string::npos);
  }
}

TEST_CASE("chain a->b->c levels") {
  ParseTree t = make_tree("chain", {{"a", "NOUN", -1}, {"b", "NOUN", 0}, {"c", "NOUN", 1}});
  CHECK(lgcaps::node_levels(t) == std::vector<int>{2, 1, 0});
}

TEST_CASE("node levels match brute force on random trees") {
  std::mt19937_64 eng(42);
  for (int it = 0; it < 300; ++it) {
    ParseTree t = random_tree(eng, 12);
    lgcaps::validate_tree(t);
    CHECK(lgcaps::node_levels(t) == levels_ref(t));
  }
}

TEST_CASE("pruning drops only mismatched original leaves") {
  // "is there a red square": leaves there/a/red/square
  ParseTree t = make_tree("exist", {
                                       {"is", "AUX", -1},         // 0
                                       {"there", "PRON", 0},      // 1
                                       {"a", "DET", 4},           // 2
                                       {"red", "COLOR-ADJ", 4},   // 3
                                       {"square", "NOUN", 0},     // 4
                                   });
  ParseTree kept_nouns = lgcaps::prune_leaves(t, {"NOUN"});
  CHECK(kept_nouns.tokens[1].pruned);   // there
  CHECK(kept_nouns.tokens[2].pruned);   // a
  CHECK(kept_nouns.tokens[3].pruned);   // red
  CHECK_FALSE(kept_nouns.tokens[4].pruned);
  CHECK_FALSE(kept_nouns.tokens[0].pruned);  // internal node survives

  ParseTree cogent = lgcaps::prune_leaves(t, {"NOUN", "COLOR-ADJ"});
  CHECK_FALSE(cogent.tokens[3].pruned);  // "red" retained
  CHECK(cogent.tokens[2].pruned);        // "a" still dropped

  // A node exposed as a leaf by pruning is not re-pruned: "square" keeps its
  // AUX parent even when every original leaf under it vanishes.
  ParseTree all_noun = make_tree("nn", {{"objects", "NOUN", -1}, {"cubes", "NOUN", 0}});
  ParseTree unchanged = lgcaps::prune_leaves(all_noun, {"NOUN"});
  CHECK_FALSE(unchanged.tokens[0].pruned);
  CHECK_FALSE(unchanged.tokens[1].pruned);

  ParseTree lone = make_tree("lone", {{"red", "COLOR-ADJ", -1}});
  CHECK_THROWS_AS(lgcaps::prune_leaves(lone, {"NOUN"}), lgcaps::ParseError);
}

TEST_CASE("walkthrough layout reproduces the published grouping") {
  ParseTree t = walkthrough_tree();
  lgcaps::validate_tree(t);
  const auto lv = lgcaps::node_levels(t);
  CHECK(lv[5] == 0);  // than
  CHECK(lv[6] == 0);  // tiny
  CHECK(lv[7] == 1);  // cylinders
  CHECK(lv[4] == 2);  // things
  CHECK(lv[0] == 3);  // are

  LinguisticLayout lay = lgcaps::build_layout(t, 4);
  CHECK(lay.H == 3);
  CHECK(lay.groups[0].size() == 8);  // every word as a singleton
  for (const auto& g : lay.groups[0]) CHECK(g.size() == 1);
  REQUIRE(lay.groups[1].size() == 1);
  CHECK(lay.groups[1][0] == std::vector<int>{5, 6, 7});  // {than, tiny, cylinders}
  REQUIRE(lay.groups[2].size() == 1);
  CHECK(lay.groups[2][0] == std::vector<int>{2, 3, 4, 5, 6, 7});
  CHECK(lay.groups[3][0].size() == 8);
  CHECK(lgcaps::layout_consistent(lay));

  Tensor g1 = lgcaps::correlation_matrix(lay, 1);
  CHECK(g1.at(5, 6) == 1.0);   // (than, tiny)
  CHECK(g1.at(5, 7) == 1.0);   // (than, cylinders)
  CHECK(g1.at(5, 3) == 0.0);   // gray is in no level-1 group
  CHECK(g1.at(0, 0) == 0.0);   // neither is the root
}

TEST_CASE("truncation collapses deep levels into the root group") {
  ParseTree t = walkthrough_tree();  // height 3
  LinguisticLayout lay = lgcaps::build_layout(t, 2);
  CHECK(lay.H == 2);
  REQUIRE(lay.groups[2].size() == 1);
  CHECK(lay.groups[2][0].size() == 8);  // root subtree = whole sentence
  CHECK(lay.groups[1][0] == std::vector<int>{5, 6, 7});
  CHECK(lgcaps::layout_consistent(lay));
}

TEST_CASE("level-0 correlation marks kept vs pruned words") {
  ParseTree t = make_tree("exist", {
                                       {"is", "AUX", -1},
                                       {"there", "PRON", 0},
                                       {"a", "DET", 4},
                                       {"red", "COLOR-ADJ", 4},
                                       {"square", "NOUN", 0},
                                   });
  ParseTree p = lgcaps::prune_leaves(t, {"NOUN", "COLOR-ADJ"});
  LinguisticLayout lay = lgcaps::build_layout(p, 4);
  Tensor g0 = lgcaps::correlation_matrix(lay, 0);
  CHECK(g0.at(0, 0) == 1.0);   // kept word diagonal
  CHECK(g0.at(3, 3) == 1.0);
  CHECK(g0.at(0, 3) == -1.0);  // distinct singletons
  for (int j = 0; j < 5; ++j) {
    CHECK(g0.at(1, j) == 0.0);  // pruned rows are zero
    CHECK(g0.at(j, 2) == 0.0);
  }
}

TEST_CASE("block structure of a two-group level") {
  LinguisticLayout lay;
  lay.n_q = 6;
  lay.H = 1;
  lay.groups = {{{0}, {1}, {2}, {3}, {4}, {5}}, {{0, 1, 2}, {3, 4, 5}}};
  Tensor g = lgcaps::correlation_matrix(lay, 1);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      const bool same = (i < 3) == (j < 3);
      CHECK(g.at(i, j) == (same ? 1.0 : -1.0));
    }
}

TEST_CASE("correlation matrices are symmetric with entries in -1,0,1") {
  std::mt19937_64 eng(7);
  for (int it = 0; it < 100; ++it) {
    ParseTree t = random_tree(eng, 12);
    LinguisticLayout lay = lgcaps::build_layout(t, 4);
    for (int l = 0; l <= lay.H; ++l) {
      Tensor g = lgcaps::correlation_matrix(lay, l);
      for (int i = 0; i < lay.n_q; ++i)
        for (int j = 0; j < lay.n_q; ++j) {
          CHECK(g.at(i, j) == g.at(j, i));
          CHECK((g.at(i, j) == 0.0 || g.at(i, j) == 1.0 || g.at(i, j) == -1.0));
        }
      // inside any one group the block is all ones
      for (const auto& grp : lay.groups[l])
        for (int a : grp)
          for (int b : grp) CHECK(g.at(a, b) == 1.0);
    }
  }
}

TEST_CASE("layouts from random trees are laminar") {
  std::mt19937_64 eng(11);
  for (int it = 0; it < 1000; ++it) {
    ParseTree t = random_tree(eng, 12);
    LinguisticLayout lay = lgcaps::build_layout(t, 4);
    CHECK(lgcaps::layout_consistent(lay));
    // union of g_0 is exactly the kept words
    std::set<int> g0;
    for (const auto& g : lay.groups[0]) g0.insert(g.begin(), g.end());
    const auto lv = lgcaps::node_levels(t);
    std::set<int> kept;
    for (int i = 0; i < t.n_q(); ++i)
      if (lv[i] >= 0) kept.insert(i);
    CHECK(g0 == kept);
  }
}

TEST_CASE("pad_align shifts words right and fills missing levels") {
  ParseTree t = make_tree("exist", {
                                       {"is", "AUX", -1},
                                       {"there", "PRON", 0},
                                       {"a", "DET", 4},
                                       {"red", "COLOR-ADJ", 4},
                                       {"square", "NOUN", 0},
                                   });
  ParseTree p = lgcaps::prune_leaves(t, {"NOUN", "COLOR-ADJ"});
  LinguisticLayout lay = lgcaps::build_layout(p, 4);  // height 2: is->square->red
  CHECK(lay.H == 2);
  auto aligned = lgcaps::pad_align(lay, p, 8, 4);
  CHECK(aligned.shift == 3);  // word 0 maps to slot 3
  CHECK(aligned.layout.n_q == 8);
  CHECK(aligned.layout.H == 4);
  CHECK(aligned.tokens.size() == 8);
  CHECK(aligned.tokens[3].text == "is");
  CHECK(aligned.tokens[7].text == "square");
  CHECK(aligned.tokens[0].pruned);

  // levels 3 and 4 replicate the root group {is, red, square} -> {3, 6, 7}
  const std::vector<int> root{3, 6, 7};
  REQUIRE(aligned.layout.groups[3].size() == 1);
  CHECK(aligned.layout.groups[3][0] == root);
  CHECK(aligned.layout.groups[4][0] == root);
  CHECK(lgcaps::layout_consistent(aligned.layout));

  // padded slots have all-zero correlation rows at every level
  for (int l = 0; l <= 4; ++l) {
    Tensor g = lgcaps::correlation_matrix(aligned.layout, l);
    for (int pad = 0; pad < 3; ++pad)
      for (int j = 0; j < 8; ++j) {
        CHECK(g.at(pad, j) == 0.0);
        CHECK(g.at(j, pad) == 0.0);
      }
  }

  // identity when the question already fills the window
  auto same = lgcaps::pad_align(lay, p, 5, 2);
  CHECK(same.shift == 0);
  CHECK(same.layout.groups[1] == lay.groups[1]);

  CHECK_THROWS_AS(lgcaps::pad_align(lay, p, 4, 4), lgcaps::ConfigError);
}

TEST_CASE("single-token question reaches the top layer via padding") {
  ParseTree t = make_tree("one", {{"cubes", "NOUN", -1}});
  LinguisticLayout lay = lgcaps::build_layout(t, 4);
  CHECK(lay.H == 0);
  auto aligned = lgcaps::pad_align(lay, t, 8, 4);
  for (int l = 0; l <= 4; ++l) {
    REQUIRE(aligned.layout.groups[l].size() == 1);
    CHECK(aligned.layout.groups[l][0] == std::vector<int>{7});
  }
}

TEST_CASE("parse-tree file round-trips byte-identically") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "lgcaps_trees_test.jsonl";
  std::vector<ParseTree> trees{walkthrough_tree(),
                               make_tree("one", {{"cubes", "NOUN", -1}})};
  lgcaps::save_parse_trees(path.string(), trees);

  auto loaded = lgcaps::load_parse_trees(path.string());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "walkthrough");
  CHECK(loaded[0].tokens[7].text == "cylinders");
  CHECK(loaded[0].tokens[7].head == 4);
  CHECK(loaded[1].tokens[0].head == lgcaps::kNoHead);

  const fs::path path2 = fs::temp_directory_path() / "lgcaps_trees_test2.jsonl";
  lgcaps::save_parse_trees(path2.string(), loaded);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("loader reports the offending line") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "lgcaps_trees_bad.jsonl";
  {
    std::ofstream out(path);
    out << lgcaps::tree_to_json_line(walkthrough_tree()) << "\n";
    out << "{not json}\n";
  }
  try {
    lgcaps::load_parse_trees(path.string());
    FAIL("expected ParseError");
  } catch (const lgcaps::ParseError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("identical inputs give identical layouts") {
  ParseTree t = walkthrough_tree();
  LinguisticLayout a = lgcaps::build_layout(t, 4);
  LinguisticLayout b = lgcaps::build_layout(t, 4);
  CHECK(a.groups == b.groups);
  Tensor ga = lgcaps::correlation_matrix(a, 1), gb = lgcaps::correlation_matrix(b, 1);
  for (int i = 0; i < a.n_q * a.n_q; ++i) CHECK(ga.data()[i] == gb.data()[i]);
}
