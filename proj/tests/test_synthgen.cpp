#include "lgcaps/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "doctest.h"
#include "lgcaps/rng.hpp"

using lgcaps::Condition;
using lgcaps::Dataset;
using lgcaps::Family;
using lgcaps::ObjShape;
using lgcaps::ParseTree;
using lgcaps::QuestionRecord;
using lgcaps::Rng;
using lgcaps::SceneObject;
using lgcaps::SceneSpec;
using lgcaps::Shape;
using lgcaps::Tensor;

namespace {

SceneObject obj(ObjShape s, int color, bool large, int row, int col) {
  SceneObject o;
  o.shape = s;
  o.color = color;
  o.large = large;
  o.row = row;
  o.col = col;
  return o;
}

bool scenes_equal(const SceneSpec& a, const SceneSpec& b) {
  if (a.objects.size() != b.objects.size()) return false;
  auto key = [](const SceneObject& o) { return o.row * 4 + o.col; };
  std::vector<SceneObject> av = a.objects, bv = b.objects;
  std::sort(av.begin(), av.end(), [&](auto& x, auto& y) { return key(x) < key(y); });
  std::sort(bv.begin(), bv.end(), [&](auto& x, auto& y) { return key(x) < key(y); });
  for (std::size_t i = 0; i < av.size(); ++i)
    if (av[i].shape != bv[i].shape || av[i].color != bv[i].color || av[i].large != bv[i].large ||
        av[i].row != bv[i].row || av[i].col != bv[i].col)
      return false;
  return true;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// independent recount used against gen_question output
std::string recount(const SceneSpec& scene, const ParseTree& tree) {
  auto strip = [](std::string w) {
    if (!w.empty() && w.back() == 's' && w != "is") w.pop_back();
    return w;
  };
  const auto& t = tree.tokens;
  auto count = [&](const std::string& color, const std::string& shape) {
    int n = 0;
    for (const auto& o : scene.objects)
      n += lgcaps::color_names()[static_cast<std::size_t>(o.color)] == color &&
           lgcaps::shape_names()[static_cast<int>(o.shape)] == strip(shape);
    return n;
  };
  if (t[0].text == "is") return count(t[3].text, t[4].text) > 0 ? "yes" : "no";
  if (t[0].text == "how") {
    int n = 0;
    for (const auto& o : scene.objects)
      n += lgcaps::color_names()[static_cast<std::size_t>(o.color)] == t[2].text;
    return std::to_string(n);
  }
  if (t[0].text == "are") return count(t[3].text, t[4].text) > count(t[6].text, t[7].text) ? "yes" : "no";
  // query
  for (const auto& o : scene.objects)
    if (lgcaps::shape_names()[static_cast<int>(o.shape)] == t[5].text &&
        o.large == (t[4].text == "large"))
      return lgcaps::color_names()[static_cast<std::size_t>(o.color)];
  return "?";
}

}  // namespace

TEST_CASE("rendering: background, exact glyph placement, determinism") {
  SceneSpec empty;
  empty.cond = Condition::kA;
  const Tensor bgimg = render_scene(empty);
  const auto bg = lgcaps::background_rgb();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        REQUIRE(bgimg.at(c, y, x) == bg[static_cast<std::size_t>(c)] / 255.0);

  SceneSpec s;
  s.cond = Condition::kA;
  s.objects.push_back(obj(ObjShape::kSquare, 0, true, 0, 0));  // large red square
  const Tensor img = render_scene(s);
  const auto red = lgcaps::color_rgb(0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool in_glyph = y <= 6 && x <= 6;  // 7x7 block anchored at the cell
      for (int c = 0; c < 3; ++c) {
        const double want =
            (in_glyph ? red[static_cast<std::size_t>(c)] : bg[static_cast<std::size_t>(c)]) / 255.0;
        REQUIRE(img.at(c, y, x) == want);
      }
    }

  // small glyphs leave the cell's outer ring untouched
  SceneSpec s2;
  s2.cond = Condition::kA;
  s2.objects.push_back(obj(ObjShape::kSquare, 2, false, 2, 3));  // small blue square
  const Tensor img2 = render_scene(s2);
  const auto blue = lgcaps::color_rgb(2);
  for (int y = 16; y < 24; ++y)
    for (int x = 24; x < 32; ++x) {
      const bool in_glyph = y >= 17 && y <= 21 && x >= 25 && x <= 29;
      CHECK(img2.at(0, y, x) ==
            (in_glyph ? blue[0] : bg[0]) / 255.0);
    }

  const Tensor again = render_scene(s);
  for (std::int64_t i = 0; i < img.numel(); ++i) REQUIRE(img.data()[i] == again.data()[i]);

  SceneSpec clash = s;
  clash.objects.push_back(obj(ObjShape::kCircle, 4, false, 0, 0));
  CHECK_THROWS_AS(render_scene(clash), lgcaps::Error);
}

TEST_CASE("render/decode round-trip is exact") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const Condition cond = trial % 2 == 0 ? Condition::kA : Condition::kB;
    const SceneSpec s = lgcaps::sample_scene(rng, cond);
    const SceneSpec back = lgcaps::decode_scene(render_scene(s), cond);
    REQUIRE(scenes_equal(s, back));
    REQUIRE(back.cond == cond);
  }
  Tensor junk(Shape{3, 32, 32});
  for (std::int64_t i = 0; i < junk.numel(); ++i) junk.data()[i] = 0.5;
  CHECK_THROWS_AS(lgcaps::decode_scene(junk, Condition::kA), lgcaps::IoError);
}

TEST_CASE("sampled scenes respect the palette and the grid") {
  Rng rng(32);
  for (int trial = 0; trial < 2000; ++trial) {
    const Condition cond = trial % 2 == 0 ? Condition::kA : Condition::kB;
    const SceneSpec s = lgcaps::sample_scene(rng, cond);
    REQUIRE(s.objects.size() >= 1);
    REQUIRE(s.objects.size() <= 4);
    REQUIRE(lgcaps::palette_ok(s));
    std::vector<int> cells;
    for (const auto& o : s.objects) {
      cells.push_back(o.row * 4 + o.col);
      if (cond == Condition::kA) {
        if (o.shape == ObjShape::kSquare) CHECK(o.color <= 3);   // never cyan/... squares
        if (o.shape == ObjShape::kCircle) CHECK(o.color >= 4);
      } else {
        if (o.shape == ObjShape::kSquare) CHECK(o.color >= 4);   // never red/... squares
        if (o.shape == ObjShape::kCircle) CHECK(o.color <= 3);
      }
    }
    std::sort(cells.begin(), cells.end());
    CHECK(std::adjacent_find(cells.begin(), cells.end()) == cells.end());
  }
}

TEST_CASE("attribute marginals are uniform within 3 percent") {
  Rng rng(33);
  std::map<int, long> shape_n, color_n, size_n;
  long total = 0;
  for (int i = 0; i < 50000; ++i) {
    const SceneSpec s = lgcaps::sample_scene(rng, Condition::kA);
    for (const auto& o : s.objects) {
      ++shape_n[static_cast<int>(o.shape)];
      ++color_n[o.color];
      ++size_n[o.large];
      ++total;
    }
  }
  for (int s = 0; s < 3; ++s)
    CHECK(std::fabs(shape_n[s] / static_cast<double>(total) - 1.0 / 3) <= 0.03);
  for (int c = 0; c < 8; ++c)
    CHECK(std::fabs(color_n[c] / static_cast<double>(total) - 1.0 / 8) <= 0.03);
  for (int z = 0; z < 2; ++z)
    CHECK(std::fabs(size_n[z] / static_cast<double>(total) - 1.0 / 2) <= 0.03);
}

TEST_CASE("oracle answers by direct counting") {
  SceneSpec s;
  s.cond = Condition::kA;
  s.objects.push_back(obj(ObjShape::kSquare, 0, false, 0, 0));  // red square
  CHECK(lgcaps::answer_oracle(s, lgcaps::exist_tree("red", "square")) == "yes");
  CHECK(lgcaps::answer_oracle(s, lgcaps::exist_tree("green", "square")) == "no");
  CHECK(lgcaps::answer_oracle(s, lgcaps::count_tree("blue")) == "0");
  CHECK(lgcaps::answer_oracle(s, lgcaps::count_tree("red")) == "1");

  SceneSpec cmp;
  cmp.cond = Condition::kA;
  cmp.objects.push_back(obj(ObjShape::kSquare, 0, false, 0, 0));
  cmp.objects.push_back(obj(ObjShape::kSquare, 0, true, 1, 1));
  cmp.objects.push_back(obj(ObjShape::kCircle, 2, false, 2, 2));
  CHECK(lgcaps::answer_oracle(cmp, lgcaps::compare_tree("red", "square", "blue", "circle")) ==
        "yes");
  CHECK(lgcaps::answer_oracle(cmp, lgcaps::compare_tree("blue", "circle", "red", "square")) ==
        "no");

  SceneSpec q;
  q.cond = Condition::kA;
  q.objects.push_back(obj(ObjShape::kTriangle, 1, true, 3, 3));  // large green triangle
  q.objects.push_back(obj(ObjShape::kSquare, 0, false, 0, 1));
  CHECK(lgcaps::answer_oracle(q, lgcaps::query_tree("large", "triangle")) == "green");
  CHECK_THROWS_AS(lgcaps::answer_oracle(q, lgcaps::query_tree("small", "triangle")),
                  lgcaps::Error);  // no such referent

  ParseTree bad = lgcaps::exist_tree("red", "square");
  bad.tokens[0].text = "was";
  CHECK_THROWS_AS(lgcaps::answer_oracle(s, bad), lgcaps::ParseError);
}

TEST_CASE("gold trees validate, prune, and lay out as designed") {
  struct Case {
    ParseTree tree;
    std::vector<int> pruned;
    std::vector<int> heads;
  };
  const std::vector<Case> cases = {
      {lgcaps::exist_tree("red", "square"), {1, 2}, {-1, 0, 4, 4, 0}},
      {lgcaps::count_tree("gray"), {0, 5}, {1, 3, 3, 4, -1, 4}},
      {lgcaps::compare_tree("red", "square", "blue", "circle"),
       {1, 2, 5},
       {-1, 0, 4, 4, 0, 7, 7, 4}},
      {lgcaps::query_tree("small", "triangle"), {0, 3, 4}, {1, 2, -1, 5, 5, 2}},
  };
  for (const auto& c : cases) {
    CHECK_NOTHROW(lgcaps::validate_tree(c.tree));
    REQUIRE(c.tree.n_q() <= 8);
    for (int i = 0; i < c.tree.n_q(); ++i)
      CHECK(c.tree.tokens[static_cast<std::size_t>(i)].head ==
            c.heads[static_cast<std::size_t>(i)]);

    const ParseTree pruned = lgcaps::prune_leaves(c.tree, lgcaps::cogent_keep_pos());
    for (int i = 0; i < pruned.n_q(); ++i) {
      const bool want =
          std::find(c.pruned.begin(), c.pruned.end(), i) != c.pruned.end();
      CHECK(pruned.tokens[static_cast<std::size_t>(i)].pruned == want);
    }
    const auto layout = lgcaps::build_layout(pruned, 4);
    CHECK(lgcaps::layout_consistent(layout));
    const auto aligned = lgcaps::pad_align(layout, pruned, 8, 4);
    CHECK(aligned.layout.H == 4);
  }
  // the comparison clause is a depth-2 subtree grouping than + color2 + shape2
  const auto& cmp = cases[2].tree;
  CHECK(cmp.tokens[5].head == 7);
  CHECK(cmp.tokens[6].head == 7);
  CHECK(cmp.tokens[7].head == 4);
}

TEST_CASE("gen_question applies only where its family makes sense") {
  Rng rng(34);

  SceneSpec lone;
  lone.cond = Condition::kA;
  lone.objects.push_back(obj(ObjShape::kSquare, 0, false, 0, 0));
  CHECK(!lgcaps::gen_question(lone, Family::kCompare, rng).has_value());

  SceneSpec twins;
  twins.cond = Condition::kA;
  twins.objects.push_back(obj(ObjShape::kSquare, 0, false, 0, 0));
  twins.objects.push_back(obj(ObjShape::kSquare, 2, false, 1, 1));
  CHECK(!lgcaps::gen_question(twins, Family::kQuery, rng).has_value());

  int produced = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const Condition cond = trial % 2 == 0 ? Condition::kA : Condition::kB;
    const SceneSpec s = lgcaps::sample_scene(rng, cond);
    const auto fam = static_cast<Family>(rng.uniform_int(4));
    const auto rec = lgcaps::gen_question(s, fam, rng);
    if (!rec) continue;
    ++produced;
    CHECK_NOTHROW(lgcaps::validate_tree(rec->tree));
    CHECK(rec->tree.n_q() <= 8);
    CHECK(rec->template_id == lgcaps::family_names()[static_cast<int>(fam)]);
    REQUIRE(rec->answer == recount(s, rec->tree));
  }
  CHECK(produced >= 300);
}

TEST_CASE("generated datasets are balanced, deterministic, and self-consistent") {
  const Dataset ds = lgcaps::gen_dataset(400, Condition::kA, 101);
  REQUIRE(ds.records.size() == 400);
  REQUIRE(ds.scenes.size() == 400);
  CHECK(lgcaps::self_check(ds) == 0);

  std::map<std::string, int> family_n;
  std::map<std::string, int> exist_ans, count_ans, compare_ans, query_ans;
  for (const auto& r : ds.records) {
    ++family_n[r.template_id];
    if (r.template_id == "exist") ++exist_ans[r.answer];
    if (r.template_id == "count") ++count_ans[r.answer];
    if (r.template_id == "compare") ++compare_ans[r.answer];
    if (r.template_id == "query") ++query_ans[r.answer];
  }
  for (const auto& f : lgcaps::family_names()) CHECK(family_n[f] == 100);
  CHECK(exist_ans["yes"] == 50);
  CHECK(exist_ans["no"] == 50);
  CHECK(compare_ans["yes"] == 50);
  CHECK(compare_ans["no"] == 50);
  for (int t = 0; t <= 4; ++t) CHECK(count_ans[std::to_string(t)] == 20);
  for (const auto& c : lgcaps::color_names()) {
    CHECK(query_ans[c] >= 12);
    CHECK(query_ans[c] <= 13);
  }

  const Dataset again = lgcaps::gen_dataset(400, Condition::kA, 101);
  for (int i = 0; i < 400; ++i) {
    REQUIRE(scenes_equal(ds.scenes[static_cast<std::size_t>(i)],
                         again.scenes[static_cast<std::size_t>(i)]));
    REQUIRE(ds.records[static_cast<std::size_t>(i)].answer ==
            again.records[static_cast<std::size_t>(i)].answer);
  }
  const Dataset other = lgcaps::gen_dataset(400, Condition::kA, 102);
  int diff = 0;
  for (int i = 0; i < 400; ++i)
    diff += !scenes_equal(ds.scenes[static_cast<std::size_t>(i)],
                          other.scenes[static_cast<std::size_t>(i)]);
  CHECK(diff > 200);

  const Dataset b = lgcaps::gen_dataset(200, Condition::kB, 103);
  CHECK(lgcaps::self_check(b) == 0);
  for (const auto& s : b.scenes) REQUIRE(lgcaps::palette_ok(s));

  Dataset broken = lgcaps::gen_dataset(40, Condition::kA, 104);
  broken.records[7].answer = broken.records[7].answer == "yes" ? "no" : "yes";
  CHECK(lgcaps::self_check(broken) >= 1);

  CHECK_THROWS_AS(lgcaps::gen_dataset(0, Condition::kA, 1), lgcaps::ConfigError);
}

TEST_CASE("answer vocabulary covers every generated answer") {
  const auto& vocab = lgcaps::answer_vocab();
  REQUIRE(vocab.size() == 15);
  for (std::size_t i = 0; i < vocab.size(); ++i)
    CHECK(lgcaps::answer_index(vocab[i]) == static_cast<int>(i));
  CHECK_THROWS_AS(lgcaps::answer_index("maybe"), lgcaps::ParseError);

  const Dataset ds = lgcaps::gen_dataset(200, Condition::kB, 105);
  for (const auto& r : ds.records) CHECK_NOTHROW(lgcaps::answer_index(r.answer));

  // every template word is in the question lexicon
  const auto lex = lgcaps::question_lexicon();
  for (const auto& r : ds.records)
    for (const auto& t : r.tree.tokens)
      CHECK(std::find(lex.begin(), lex.end(), t.text) != lex.end());
}

TEST_CASE("dataset files round-trip and reject tampering") {
  namespace fs = std::filesystem;
  const fs::path base = fs::temp_directory_path();
  const std::string d1 = (base / "lgcaps_ds_a").string();
  const std::string d2 = (base / "lgcaps_ds_b").string();
  fs::remove_all(d1);
  fs::remove_all(d2);

  const Dataset ds = lgcaps::gen_dataset(40, Condition::kA, 106);
  lgcaps::write_dataset(d1, ds);
  lgcaps::write_dataset(d2, lgcaps::gen_dataset(40, Condition::kA, 106));
  for (const char* f : {"manifest.txt", "images.u8", "questions.jsonl", "trees.jsonl"})
    REQUIRE(slurp(fs::path(d1) / f) == slurp(fs::path(d2) / f));

  const Dataset back = lgcaps::read_dataset(d1);
  REQUIRE(back.records.size() == 40);
  CHECK(back.cond == Condition::kA);
  CHECK(back.seed == 106);
  for (int i = 0; i < 40; ++i) {
    REQUIRE(scenes_equal(back.scenes[static_cast<std::size_t>(i)],
                         ds.scenes[static_cast<std::size_t>(i)]));
    CHECK(back.records[static_cast<std::size_t>(i)].answer ==
          ds.records[static_cast<std::size_t>(i)].answer);
    CHECK(back.records[static_cast<std::size_t>(i)].template_id ==
          ds.records[static_cast<std::size_t>(i)].template_id);
    CHECK(lgcaps::tree_to_json_line(back.records[static_cast<std::size_t>(i)].tree) ==
          lgcaps::tree_to_json_line(ds.records[static_cast<std::size_t>(i)].tree));
  }
  CHECK(lgcaps::self_check(back) == 0);

  // tampered magic
  {
    std::ofstream mf(fs::path(d2) / "manifest.txt");
    mf << "lgcaps-dataset v2\nn 40\ncondition A\nseed 106\nimg_c 3\nimg_hw 32\n";
  }
  CHECK_THROWS_AS(lgcaps::read_dataset(d2), lgcaps::IoError);

  // truncated image container
  {
    std::ofstream mf(fs::path(d2) / "manifest.txt");
    mf << "lgcaps-dataset v1\nn 40\ncondition A\nseed 106\nimg_c 3\nimg_hw 32\n";
    const std::string bytes = slurp(fs::path(d2) / "images.u8");
    std::ofstream imf(fs::path(d2) / "images.u8", std::ios::binary);
    imf.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
  }
  CHECK_THROWS_AS(lgcaps::read_dataset(d2), lgcaps::IoError);

  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("a text-only bag-of-words classifier stays near chance") {
  const Dataset train = lgcaps::gen_dataset(3000, Condition::kA, 107);
  const Dataset val = lgcaps::gen_dataset(1000, Condition::kA, 108);

  const auto lex = lgcaps::question_lexicon();
  std::unordered_map<std::string, int> fid;
  for (std::size_t i = 0; i < lex.size(); ++i) fid[lex[i]] = static_cast<int>(i);
  const int D = static_cast<int>(lex.size()) + 1;  // + bias
  const int K = static_cast<int>(lgcaps::answer_vocab().size());

  auto featurize = [&](const QuestionRecord& r) {
    std::vector<int> f;
    for (const auto& t : r.tree.tokens) {
      const int id = fid.at(t.text);
      if (std::find(f.begin(), f.end(), id) == f.end()) f.push_back(id);
    }
    f.push_back(D - 1);
    return f;
  };

  std::vector<std::vector<int>> X;
  std::vector<int> y;
  for (const auto& r : train.records) {
    X.push_back(featurize(r));
    y.push_back(lgcaps::answer_index(r.answer));
  }

  std::vector<double> W(static_cast<std::size_t>(K * D), 0.0);
  std::vector<double> grad(W.size()), p(static_cast<std::size_t>(K));
  const double lr = 0.5;
  for (int iter = 0; iter < 300; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t s = 0; s < X.size(); ++s) {
      double mx = -1e300;
      for (int k = 0; k < K; ++k) {
        double z = 0.0;
        for (int f : X[s]) z += W[static_cast<std::size_t>(k * D + f)];
        p[static_cast<std::size_t>(k)] = z;
        mx = std::max(mx, z);
      }
      double zsum = 0.0;
      for (int k = 0; k < K; ++k) {
        p[static_cast<std::size_t>(k)] = std::exp(p[static_cast<std::size_t>(k)] - mx);
        zsum += p[static_cast<std::size_t>(k)];
      }
      for (int k = 0; k < K; ++k) {
        const double g = p[static_cast<std::size_t>(k)] / zsum - (k == y[s] ? 1.0 : 0.0);
        for (int f : X[s]) grad[static_cast<std::size_t>(k * D + f)] += g;
      }
    }
    for (std::size_t i = 0; i < W.size(); ++i) W[i] -= lr * grad[i] / static_cast<double>(X.size());
  }

  int hits = 0;
  for (const auto& r : val.records) {
    const auto f = featurize(r);
    int best = 0;
    double bz = -1e300;
    for (int k = 0; k < K; ++k) {
      double z = 0.0;
      for (int fi : f) z += W[static_cast<std::size_t>(k * D + fi)];
      if (z > bz) {
        bz = z;
        best = k;
      }
    }
    hits += best == lgcaps::answer_index(r.answer);
  }
  const double acc = hits / static_cast<double>(val.records.size());
  CHECK(acc <= 0.60);   // questions alone must not give the answers away
  CHECK(acc >= 0.25);   // ... but the probe itself has to have learned the priors
}
