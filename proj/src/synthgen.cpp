#include "lgcaps/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace lgcaps {

namespace {

using nlohmann::json;

constexpr int kCells = kGrid * kGrid;
constexpr int kFrameBytes = 3 * kImgHw * kImgHw;
constexpr const char* kManifestMagic = "lgcaps-dataset v1";

const std::set<std::string> kPosInventory = {"NOUN", "VERB", "ADJ", "COLOR-ADJ", "DET",
                                             "ADP",  "NUM",  "PRON", "AUX"};

Token tok(int index, std::string text, std::string pos, int head) {
  Token t;
  t.index = index;
  t.text = std::move(text);
  t.pos = std::move(pos);
  t.head = head;
  return t;
}

bool glyph_filled(ObjShape s, int k, int i, int j) {
  const double c = (k - 1) / 2.0;
  switch (s) {
    case ObjShape::kSquare:
      return true;
    case ObjShape::kCircle:
      return (i - c) * (i - c) + (j - c) * (j - c) <= (c + 0.5) * (c + 0.5);
    case ObjShape::kTriangle:
      return std::fabs(j - c) <= i / 2.0;
  }
  return false;
}

int glyph_px(bool large) { return large ? 7 : 5; }
int glyph_off(int k) { return (kCellPx - k) / 2; }

// uniform attributes subject to the palette rule; cell left unset
SceneObject random_object(Rng& rng, Condition cond) {
  SceneObject o;
  o.shape = static_cast<ObjShape>(rng.uniform_int(3));
  const std::vector<int> cols = allowed_colors(o.shape, cond);
  o.color = cols[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cols.size())))];
  o.large = rng.uniform_int(2) == 1;
  return o;
}

struct SceneBuilder {
  SceneSpec scene;
  std::vector<int> free_cells;

  explicit SceneBuilder(Condition cond) {
    scene.cond = cond;
    for (int i = 0; i < kCells; ++i) free_cells.push_back(i);
  }
  void place(Rng& rng, SceneObject o) {
    if (free_cells.empty()) throw Error("scene builder: no free cells");
    const int k = rng.uniform_int(static_cast<int>(free_cells.size()));
    const int cell = free_cells[static_cast<std::size_t>(k)];
    free_cells.erase(free_cells.begin() + k);
    o.row = cell / kGrid;
    o.col = cell % kGrid;
    scene.objects.push_back(o);
  }
};

template <class Pred>
SceneObject random_object_where(Rng& rng, Condition cond, Pred pred) {
  for (int tries = 0; tries < 256; ++tries) {
    SceneObject o = random_object(rng, cond);
    if (pred(o)) return o;
  }
  throw Error("object sampler: predicate never satisfied");
}

std::vector<ObjShape> shapes_for_color(int color, Condition cond) {
  std::vector<ObjShape> out;
  for (int s = 0; s < 3; ++s) {
    const auto shape = static_cast<ObjShape>(s);
    const auto cols = allowed_colors(shape, cond);
    if (std::find(cols.begin(), cols.end(), color) != cols.end()) out.push_back(shape);
  }
  return out;
}

int count_color(const SceneSpec& scene, int color) {
  int n = 0;
  for (const auto& o : scene.objects) n += o.color == color;
  return n;
}

int count_combo(const SceneSpec& scene, int color, ObjShape shape) {
  int n = 0;
  for (const auto& o : scene.objects) n += o.color == color && o.shape == shape;
  return n;
}

std::string condition_str(Condition c) { return c == Condition::kA ? "A" : "B"; }

Condition condition_from_str(const std::string& s) {
  if (s == "A") return Condition::kA;
  if (s == "B") return Condition::kB;
  throw IoError("unknown condition '" + s + "'");
}

// ---- per-family balanced builders (scene and question built jointly) ----

struct Built {
  SceneSpec scene;
  ParseTree tree;
  Family fam;
};

Built build_exist(Rng& rng, Condition cond, bool want_yes) {
  Built b;
  b.fam = Family::kExist;
  if (want_yes) {
    SceneBuilder sb(cond);
    SceneObject target = random_object(rng, cond);
    sb.place(rng, target);
    const int extra = rng.uniform_int(4);
    for (int i = 0; i < extra; ++i) sb.place(rng, random_object(rng, cond));
    b.scene = sb.scene;
    b.tree = exist_tree(color_names()[static_cast<std::size_t>(target.color)],
                        shape_names()[static_cast<int>(target.shape)]);
    return b;
  }
  b.scene = sample_scene(rng, cond);
  // shape first so the mentioned-shape marginal matches the "yes" branch
  std::array<int, 3> order = {0, 1, 2};
  rng.shuffle(order.begin(), order.end());
  for (int s : order) {
    const auto shape = static_cast<ObjShape>(s);
    std::vector<int> absent;
    for (int c : allowed_colors(shape, cond))
      if (count_combo(b.scene, c, shape) == 0) absent.push_back(c);
    if (absent.empty()) continue;
    const int c = absent[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(absent.size())))];
    b.tree = exist_tree(color_names()[static_cast<std::size_t>(c)], shape_names()[s]);
    return b;
  }
  throw Error("exist builder: every feasible combination present");  // impossible: <=4 objects
}

Built build_count(Rng& rng, Condition cond, int target) {
  Built b;
  b.fam = Family::kCount;
  const int color = rng.uniform_int(kNumColors);
  SceneBuilder sb(cond);
  const auto shapes = shapes_for_color(color, cond);
  for (int i = 0; i < target; ++i) {
    SceneObject o;
    o.shape = shapes[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(shapes.size())))];
    o.color = color;
    o.large = rng.uniform_int(2) == 1;
    sb.place(rng, o);
  }
  const int lo = target == 0 ? 1 : 0;
  const int extra = lo + rng.uniform_int(4 - target + (1 - lo));
  for (int i = 0; i < extra; ++i)
    sb.place(rng, random_object_where(rng, cond, [&](const SceneObject& o) { return o.color != color; }));
  b.scene = sb.scene;
  b.tree = count_tree(color_names()[static_cast<std::size_t>(color)]);
  return b;
}

Built build_compare(Rng& rng, Condition cond, bool want_yes) {
  Built b;
  b.fam = Family::kCompare;
  static const std::vector<std::pair<int, int>> yes_counts = {{2, 1}, {3, 1}};
  static const std::vector<std::pair<int, int>> no_counts = {{1, 1}, {1, 2}, {2, 2}, {1, 3}};
  const auto& counts = want_yes ? yes_counts : no_counts;
  const auto [n1, n2] = counts[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(counts.size())))];

  const SceneObject a = random_object(rng, cond);
  const SceneObject bb = random_object_where(
      rng, cond, [&](const SceneObject& o) { return o.color != a.color || o.shape != a.shape; });
  SceneBuilder sb(cond);
  for (int i = 0; i < n1; ++i) {
    SceneObject o = a;
    o.large = rng.uniform_int(2) == 1;
    sb.place(rng, o);
  }
  for (int i = 0; i < n2; ++i) {
    SceneObject o = bb;
    o.large = rng.uniform_int(2) == 1;
    sb.place(rng, o);
  }
  const int extra = rng.uniform_int(4 - n1 - n2 + 1);
  for (int i = 0; i < extra; ++i)
    sb.place(rng, random_object_where(rng, cond, [&](const SceneObject& o) {
               return (o.color != a.color || o.shape != a.shape) &&
                      (o.color != bb.color || o.shape != bb.shape);
             }));
  b.scene = sb.scene;
  b.tree = compare_tree(color_names()[static_cast<std::size_t>(a.color)],
                        shape_names()[static_cast<int>(a.shape)],
                        color_names()[static_cast<std::size_t>(bb.color)],
                        shape_names()[static_cast<int>(bb.shape)]);
  return b;
}

Built build_query(Rng& rng, Condition cond, int color) {
  Built b;
  b.fam = Family::kQuery;
  const auto shapes = shapes_for_color(color, cond);
  SceneObject target;
  target.shape = shapes[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(shapes.size())))];
  target.color = color;
  target.large = rng.uniform_int(2) == 1;
  SceneBuilder sb(cond);
  sb.place(rng, target);
  const int extra = rng.uniform_int(4);
  for (int i = 0; i < extra; ++i)
    sb.place(rng, random_object_where(rng, cond, [&](const SceneObject& o) {
               return o.shape != target.shape || o.large != target.large;
             }));
  b.scene = sb.scene;
  b.tree =
      query_tree(target.large ? "large" : "small", shape_names()[static_cast<int>(target.shape)]);
  return b;
}

}  // namespace

// ---- palette and names ----

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v = {"red",  "green",   "blue",  "yellow",
                                             "cyan", "magenta", "brown", "gray"};
  return v;
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v = {"square", "circle", "triangle"};
  return v;
}

int color_index(const std::string& name) {
  const auto& v = color_names();
  const auto it = std::find(v.begin(), v.end(), name);
  if (it == v.end()) throw ParseError("unknown color '" + name + "'");
  return static_cast<int>(it - v.begin());
}

int shape_index(const std::string& name) {
  const auto& v = shape_names();
  for (int i = 0; i < 3; ++i) {
    if (name == v[static_cast<std::size_t>(i)]) return i;
    if (name == v[static_cast<std::size_t>(i)] + "s") return i;
  }
  throw ParseError("unknown shape '" + name + "'");
}

std::array<std::uint8_t, 3> color_rgb(int color) {
  static const std::array<std::array<std::uint8_t, 3>, 8> table = {{{220, 40, 40},
                                                                    {40, 200, 60},
                                                                    {50, 80, 230},
                                                                    {230, 220, 50},
                                                                    {60, 210, 220},
                                                                    {220, 60, 210},
                                                                    {140, 90, 40},
                                                                    {150, 150, 150}}};
  if (color < 0 || color >= kNumColors) throw Error("color index out of range");
  return table[static_cast<std::size_t>(color)];
}

std::array<std::uint8_t, 3> background_rgb() { return {25, 25, 25}; }

std::vector<int> allowed_colors(ObjShape shape, Condition cond) {
  static const std::vector<int> p1 = {0, 1, 2, 3};  // red green blue yellow
  static const std::vector<int> p2 = {4, 5, 6, 7};  // cyan magenta brown gray
  static const std::vector<int> all = {0, 1, 2, 3, 4, 5, 6, 7};
  switch (shape) {
    case ObjShape::kSquare:
      return cond == Condition::kA ? p1 : p2;
    case ObjShape::kCircle:
      return cond == Condition::kA ? p2 : p1;
    case ObjShape::kTriangle:
      return all;
  }
  return all;
}

bool palette_ok(const SceneSpec& scene) {
  for (const auto& o : scene.objects) {
    const auto cols = allowed_colors(o.shape, scene.cond);
    if (std::find(cols.begin(), cols.end(), o.color) == cols.end()) return false;
  }
  return true;
}

// ---- rendering ----

Tensor render_scene(const SceneSpec& scene) {
  Tensor img(Shape{3, kImgHw, kImgHw});
  const auto bg = background_rgb();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < kImgHw; ++y)
      for (int x = 0; x < kImgHw; ++x) img.at(c, y, x) = bg[static_cast<std::size_t>(c)] / 255.0;

  std::vector<char> used(kCells, 0);
  for (const auto& o : scene.objects) {
    if (o.row < 0 || o.row >= kGrid || o.col < 0 || o.col >= kGrid)
      throw Error("scene object outside the grid");
    const int cell = o.row * kGrid + o.col;
    if (used[static_cast<std::size_t>(cell)]) throw Error("two objects share a cell");
    used[static_cast<std::size_t>(cell)] = 1;

    const int k = glyph_px(o.large);
    const int y0 = o.row * kCellPx + glyph_off(k);
    const int x0 = o.col * kCellPx + glyph_off(k);
    const auto rgb = color_rgb(o.color);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        if (glyph_filled(o.shape, k, i, j))
          for (int c = 0; c < 3; ++c)
            img.at(c, y0 + i, x0 + j) = rgb[static_cast<std::size_t>(c)] / 255.0;
  }
  return img;
}

SceneSpec decode_scene(const Tensor& image, Condition cond) {
  if (image.shape() != Shape{3, kImgHw, kImgHw}) throw IoError("decode_scene: bad image shape");
  const auto bg = background_rgb();
  auto byte_at = [&](int c, int y, int x) {
    return static_cast<int>(std::lround(image.at(c, y, x) * 255.0));
  };

  SceneSpec scene;
  scene.cond = cond;
  for (int r = 0; r < kGrid; ++r)
    for (int cc = 0; cc < kGrid; ++cc) {
      // collect foreground pixels of this cell
      std::vector<std::pair<int, int>> fg;
      int rgb[3] = {0, 0, 0};
      for (int y = 0; y < kCellPx; ++y)
        for (int x = 0; x < kCellPx; ++x) {
          const int py = r * kCellPx + y, px = cc * kCellPx + x;
          const int b0 = byte_at(0, py, px), b1 = byte_at(1, py, px), b2 = byte_at(2, py, px);
          if (b0 == bg[0] && b1 == bg[1] && b2 == bg[2]) continue;
          if (!fg.empty() && (b0 != rgb[0] || b1 != rgb[1] || b2 != rgb[2]))
            throw IoError("decode_scene: mixed colors in one cell");
          rgb[0] = b0;
          rgb[1] = b1;
          rgb[2] = b2;
          fg.emplace_back(y, x);
        }
      if (fg.empty()) continue;

      int color = -1;
      for (int c = 0; c < kNumColors; ++c) {
        const auto want = color_rgb(c);
        if (rgb[0] == want[0] && rgb[1] == want[1] && rgb[2] == want[2]) color = c;
      }
      if (color < 0) throw IoError("decode_scene: unknown object color");

      int ymin = kCellPx, ymax = -1, xmin = kCellPx, xmax = -1;
      for (const auto& [y, x] : fg) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
      const int k = ymax - ymin + 1;
      if (k != xmax - xmin + 1 || (k != 5 && k != 7) || ymin != glyph_off(k) ||
          xmin != glyph_off(k))
        throw IoError("decode_scene: glyph bounding box malformed");

      std::vector<char> mask(static_cast<std::size_t>(k) * static_cast<std::size_t>(k), 0);
      for (const auto& [y, x] : fg)
        mask[static_cast<std::size_t>((y - ymin) * k + (x - xmin))] = 1;
      int shape = -1;
      for (int s = 0; s < 3; ++s) {
        bool match = true;
        for (int i = 0; i < k && match; ++i)
          for (int j = 0; j < k && match; ++j)
            match = glyph_filled(static_cast<ObjShape>(s), k, i, j) ==
                    static_cast<bool>(mask[static_cast<std::size_t>(i * k + j)]);
        if (match) shape = s;
      }
      if (shape < 0) throw IoError("decode_scene: glyph matches no shape");

      SceneObject o;
      o.shape = static_cast<ObjShape>(shape);
      o.color = color;
      o.large = k == 7;
      o.row = r;
      o.col = cc;
      scene.objects.push_back(o);
    }
  return scene;
}

SceneSpec sample_scene(Rng& rng, Condition cond) {
  SceneBuilder sb(cond);
  const int n = 1 + rng.uniform_int(4);
  for (int i = 0; i < n; ++i) sb.place(rng, random_object(rng, cond));
  return sb.scene;
}

// ---- questions ----

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> v = {"exist", "count", "compare", "query"};
  return v;
}

ParseTree exist_tree(const std::string& color, const std::string& shape) {
  ParseTree t;
  t.tokens = {tok(0, "is", "VERB", kNoHead), tok(1, "there", "PRON", 0), tok(2, "a", "DET", 4),
              tok(3, color, "COLOR-ADJ", 4), tok(4, shape, "NOUN", 0)};
  return t;
}

ParseTree count_tree(const std::string& color) {
  ParseTree t;
  t.tokens = {tok(0, "how", "PRON", 1),    tok(1, "many", "ADJ", 3),
              tok(2, color, "COLOR-ADJ", 3), tok(3, "objects", "NOUN", 4),
              tok(4, "are", "VERB", kNoHead), tok(5, "there", "PRON", 4)};
  return t;
}

ParseTree compare_tree(const std::string& c1, const std::string& s1, const std::string& c2,
                       const std::string& s2) {
  ParseTree t;
  t.tokens = {tok(0, "are", "VERB", kNoHead), tok(1, "there", "PRON", 0),
              tok(2, "more", "ADJ", 4),       tok(3, c1, "COLOR-ADJ", 4),
              tok(4, s1 + "s", "NOUN", 0),    tok(5, "than", "ADP", 7),
              tok(6, c2, "COLOR-ADJ", 7),     tok(7, s2 + "s", "NOUN", 4)};
  return t;
}

ParseTree query_tree(const std::string& size, const std::string& shape) {
  ParseTree t;
  t.tokens = {tok(0, "what", "PRON", 1), tok(1, "color", "NOUN", 2),
              tok(2, "is", "VERB", kNoHead), tok(3, "the", "DET", 5),
              tok(4, size, "ADJ", 5),    tok(5, shape, "NOUN", 2)};
  return t;
}

const std::vector<std::string>& answer_vocab() {
  static const std::vector<std::string> v = {"yes",    "no",   "0",       "1",     "2",
                                             "3",      "4",    "red",     "green", "blue",
                                             "yellow", "cyan", "magenta", "brown", "gray"};
  return v;
}

int answer_index(const std::string& a) {
  const auto& v = answer_vocab();
  const auto it = std::find(v.begin(), v.end(), a);
  if (it == v.end()) throw ParseError("unknown answer '" + a + "'");
  return static_cast<int>(it - v.begin());
}

std::vector<std::string> question_lexicon() {
  std::vector<std::string> v = {"is",   "there", "a",    "how",   "many", "objects", "are",
                                "more", "than",  "what", "color", "the",  "small",   "large"};
  for (const auto& c : color_names()) v.push_back(c);
  for (const auto& s : shape_names()) {
    v.push_back(s);
    v.push_back(s + "s");
  }
  return v;
}

const std::set<std::string>& cogent_keep_pos() {
  static const std::set<std::string> v = {"NOUN", "COLOR-ADJ"};
  return v;
}

std::string answer_oracle(const SceneSpec& scene, const ParseTree& tree) {
  const auto& t = tree.tokens;
  const int n = tree.n_q();
  if (n == 5 && t[0].text == "is" && t[1].text == "there") {
    const int color = color_index(t[3].text);
    const int shape = shape_index(t[4].text);
    return count_combo(scene, color, static_cast<ObjShape>(shape)) > 0 ? "yes" : "no";
  }
  if (n == 6 && t[0].text == "how") {
    return std::to_string(count_color(scene, color_index(t[2].text)));
  }
  if (n == 8 && t[0].text == "are" && t[2].text == "more") {
    const int n1 = count_combo(scene, color_index(t[3].text),
                               static_cast<ObjShape>(shape_index(t[4].text)));
    const int n2 = count_combo(scene, color_index(t[6].text),
                               static_cast<ObjShape>(shape_index(t[7].text)));
    return n1 > n2 ? "yes" : "no";
  }
  if (n == 6 && t[0].text == "what") {
    const bool large = t[4].text == "large";
    if (!large && t[4].text != "small") throw ParseError("unknown size '" + t[4].text + "'");
    const auto shape = static_cast<ObjShape>(shape_index(t[5].text));
    int found = -1, matches = 0;
    for (const auto& o : scene.objects)
      if (o.shape == shape && o.large == large) {
        found = o.color;
        ++matches;
      }
    if (matches != 1) throw Error("query referent not unique");
    return color_names()[static_cast<std::size_t>(found)];
  }
  throw ParseError("unrecognized question template");
}

std::optional<QuestionRecord> gen_question(const SceneSpec& scene, Family fam, Rng& rng) {
  QuestionRecord rec;
  rec.template_id = family_names()[static_cast<int>(fam)];
  switch (fam) {
    case Family::kExist: {
      const auto shape = static_cast<ObjShape>(rng.uniform_int(3));
      const auto cols = allowed_colors(shape, scene.cond);
      const int color = cols[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cols.size())))];
      rec.tree = exist_tree(color_names()[static_cast<std::size_t>(color)],
                            shape_names()[static_cast<int>(shape)]);
      break;
    }
    case Family::kCount:
      rec.tree = count_tree(color_names()[static_cast<std::size_t>(rng.uniform_int(kNumColors))]);
      break;
    case Family::kCompare: {
      // two referable groups: distinct (color, shape) combinations present
      std::vector<std::pair<int, int>> combos;
      for (const auto& o : scene.objects) {
        const std::pair<int, int> c{o.color, static_cast<int>(o.shape)};
        if (std::find(combos.begin(), combos.end(), c) == combos.end()) combos.push_back(c);
      }
      if (combos.size() < 2) return std::nullopt;
      const int i = rng.uniform_int(static_cast<int>(combos.size()));
      int j = rng.uniform_int(static_cast<int>(combos.size()) - 1);
      if (j >= i) ++j;
      rec.tree = compare_tree(color_names()[static_cast<std::size_t>(combos[static_cast<std::size_t>(i)].first)],
                              shape_names()[combos[static_cast<std::size_t>(i)].second],
                              color_names()[static_cast<std::size_t>(combos[static_cast<std::size_t>(j)].first)],
                              shape_names()[combos[static_cast<std::size_t>(j)].second]);
      break;
    }
    case Family::kQuery: {
      std::vector<std::pair<bool, int>> unique;  // (large, shape) with exactly one object
      for (int lg = 0; lg < 2; ++lg)
        for (int s = 0; s < 3; ++s) {
          int m = 0;
          for (const auto& o : scene.objects)
            m += o.large == static_cast<bool>(lg) && o.shape == static_cast<ObjShape>(s);
          if (m == 1) unique.emplace_back(lg == 1, s);
        }
      if (unique.empty()) return std::nullopt;
      const auto [large, s] = unique[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(unique.size())))];
      rec.tree = query_tree(large ? "large" : "small", shape_names()[s]);
      break;
    }
  }
  rec.answer = answer_oracle(scene, rec.tree);
  return rec;
}

// ---- dataset ----

Dataset gen_dataset(int n, Condition cond, std::uint64_t seed) {
  if (n <= 0) throw ConfigError("gen_dataset: n must be positive");
  Dataset ds;
  ds.cond = cond;
  ds.seed = seed;
  ds.scenes.reserve(static_cast<std::size_t>(n));
  ds.records.reserve(static_cast<std::size_t>(n));
  const Rng master(seed);
  static const int slots[kNumFamilies] = {2, 5, 2, 8};

  for (int i = 0; i < n; ++i) {
    Rng rng = master.derive(static_cast<std::uint64_t>(i));
    const auto fam = static_cast<Family>(i % kNumFamilies);
    const int slot = (i / kNumFamilies) % slots[i % kNumFamilies];
    Built b;
    switch (fam) {
      case Family::kExist:
        b = build_exist(rng, cond, slot == 0);
        break;
      case Family::kCount:
        b = build_count(rng, cond, slot);
        break;
      case Family::kCompare:
        b = build_compare(rng, cond, slot == 0);
        break;
      case Family::kQuery:
        b = build_query(rng, cond, slot);
        break;
    }
    QuestionRecord rec;
    rec.tree = std::move(b.tree);
    rec.tree.id = std::to_string(i);
    rec.template_id = family_names()[static_cast<int>(fam)];
    rec.answer = answer_oracle(b.scene, rec.tree);
    rec.scene_id = i;
    ds.scenes.push_back(std::move(b.scene));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

int self_check(const Dataset& ds) {
  if (ds.scenes.size() != ds.records.size()) return static_cast<int>(ds.records.size());
  int bad = 0;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    bool ok = rec.scene_id >= 0 && rec.scene_id < static_cast<int>(ds.scenes.size());
    if (ok) {
      const auto& scene = ds.scenes[static_cast<std::size_t>(rec.scene_id)];
      try {
        validate_tree(rec.tree);
        ok = rec.tree.n_q() <= 8 && palette_ok(scene) &&
             answer_oracle(scene, rec.tree) == rec.answer;
        answer_index(rec.answer);
        for (const auto& tk : rec.tree.tokens) ok = ok && kPosInventory.count(tk.pos) > 0;
      } catch (const Error&) {
        ok = false;
      }
    }
    bad += !ok;
  }
  return bad;
}

void write_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    std::ofstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw IoError("cannot write manifest in '" + dir + "'");
    mf << kManifestMagic << "\n";
    mf << "n " << ds.records.size() << "\n";
    mf << "condition " << condition_str(ds.cond) << "\n";
    mf << "seed " << ds.seed << "\n";
    mf << "img_c 3\n";
    mf << "img_hw " << kImgHw << "\n";
  }
  {
    std::ofstream imf(fs::path(dir) / "images.u8", std::ios::binary);
    if (!imf) throw IoError("cannot write images in '" + dir + "'");
    std::vector<unsigned char> frame(kFrameBytes);
    for (const auto& scene : ds.scenes) {
      const Tensor img = render_scene(scene);
      for (int p = 0; p < kFrameBytes; ++p)
        frame[static_cast<std::size_t>(p)] =
            static_cast<unsigned char>(std::lround(img.data()[p] * 255.0));
      imf.write(reinterpret_cast<const char*>(frame.data()), kFrameBytes);
    }
  }
  {
    std::ofstream qf(fs::path(dir) / "questions.jsonl");
    if (!qf) throw IoError("cannot write questions in '" + dir + "'");
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      json j;
      j["id"] = i;
      j["scene"] = ds.records[i].scene_id;
      j["template"] = ds.records[i].template_id;
      j["answer"] = ds.records[i].answer;
      qf << j.dump() << "\n";
    }
  }
  std::vector<ParseTree> trees;
  trees.reserve(ds.records.size());
  for (const auto& r : ds.records) trees.push_back(r.tree);
  save_parse_trees((fs::path(dir) / "trees.jsonl").string(), trees);
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  std::size_t n = 0;

  {
    std::ifstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw IoError("cannot read manifest in '" + dir + "'");
    std::string line;
    if (!std::getline(mf, line) || line != kManifestMagic)
      throw IoError("bad dataset manifest magic");
    std::string key;
    while (mf >> key) {
      if (key == "n")
        mf >> n;
      else if (key == "condition") {
        std::string c;
        mf >> c;
        ds.cond = condition_from_str(c);
      } else if (key == "seed")
        mf >> ds.seed;
      else if (key == "img_c" || key == "img_hw") {
        int v = 0;
        mf >> v;
        if ((key == "img_c" && v != 3) || (key == "img_hw" && v != kImgHw))
          throw IoError("dataset image geometry mismatch");
      } else
        throw IoError("unknown manifest key '" + key + "'");
      if (!mf) throw IoError("malformed manifest value for '" + key + "'");
    }
  }

  {
    std::ifstream imf(fs::path(dir) / "images.u8", std::ios::binary);
    if (!imf) throw IoError("cannot read images in '" + dir + "'");
    std::vector<unsigned char> frame(kFrameBytes);
    for (std::size_t i = 0; i < n; ++i) {
      imf.read(reinterpret_cast<char*>(frame.data()), kFrameBytes);
      if (imf.gcount() != kFrameBytes) throw IoError("image container truncated");
      Tensor img(Shape{3, kImgHw, kImgHw});
      for (int p = 0; p < kFrameBytes; ++p)
        img.data()[p] = frame[static_cast<std::size_t>(p)] / 255.0;
      ds.scenes.push_back(decode_scene(img, ds.cond));
    }
    char extra = 0;
    if (imf.read(&extra, 1) && imf.gcount() > 0) throw IoError("image container too long");
  }

  const std::vector<ParseTree> trees = load_parse_trees((fs::path(dir) / "trees.jsonl").string());
  if (trees.size() != n) throw IoError("parse-tree file record count mismatch");

  {
    std::ifstream qf(fs::path(dir) / "questions.jsonl");
    if (!qf) throw IoError("cannot read questions in '" + dir + "'");
    std::string line;
    std::size_t i = 0;
    while (std::getline(qf, line)) {
      if (line.empty()) continue;
      if (i >= n) throw IoError("question file record count mismatch");
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw IoError(std::string("bad question record: ") + e.what());
      }
      QuestionRecord rec;
      if (j.at("id").get<std::size_t>() != i) throw IoError("question record id out of order");
      rec.scene_id = j.at("scene").get<int>();
      rec.template_id = j.at("template").get<std::string>();
      rec.answer = j.at("answer").get<std::string>();
      rec.tree = trees[i];
      if (rec.tree.id != std::to_string(i)) throw IoError("tree id out of order");
      ds.records.push_back(std::move(rec));
      ++i;
    }
    if (i != n) throw IoError("question file record count mismatch");
  }
  return ds;
}

}  // namespace lgcaps
