#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lgcaps/linglayout.hpp"
#include "lgcaps/rng.hpp"
#include "lgcaps/tensor.hpp"

// Micro-VQA data generator: procedurally rendered 32x32 scenes, templated
// questions with gold dependency trees, exact oracle answers, and an A/B
// palette-swap split for compositional-generalization runs.

namespace lgcaps {

enum class ObjShape { kSquare = 0, kCircle = 1, kTriangle = 2 };
enum class Condition { kA, kB };

inline constexpr int kGrid = 4;               // cells per image side
inline constexpr int kCellPx = 8;             // pixels per cell
inline constexpr int kImgHw = kGrid * kCellPx;
inline constexpr int kNumColors = 8;

const std::vector<std::string>& color_names();  // 8 colors, fixed order
const std::vector<std::string>& shape_names();  // square, circle, triangle
int color_index(const std::string& name);       // throws ParseError on unknown
int shape_index(const std::string& name);       // accepts singular or plural
std::array<std::uint8_t, 3> color_rgb(int color);
std::array<std::uint8_t, 3> background_rgb();

struct SceneObject {
  ObjShape shape = ObjShape::kSquare;
  int color = 0;
  bool large = false;
  int row = 0, col = 0;  // grid cell
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  Condition cond = Condition::kA;
};

// Colors an object of this shape may take under the condition. Squares and
// circles draw from two disjoint 4-color palettes that swap between A and B;
// triangles are unrestricted.
std::vector<int> allowed_colors(ObjShape shape, Condition cond);
bool palette_ok(const SceneSpec& scene);

// Deterministic rasterization, (3, 32, 32), values k/255 in [0,1].
Tensor render_scene(const SceneSpec& scene);
// Exact inverse of render_scene (glyphs are unambiguous); throws IoError if
// the image is not a rendered scene.
SceneSpec decode_scene(const Tensor& image, Condition cond);
// 1-4 objects, uniform attributes subject to the palette rule, exclusive
// cells.
SceneSpec sample_scene(Rng& rng, Condition cond);

enum class Family { kExist = 0, kCount = 1, kCompare = 2, kQuery = 3 };
inline constexpr int kNumFamilies = 4;
const std::vector<std::string>& family_names();

// Gold trees, one fixed shape per family (slots filled in).
ParseTree exist_tree(const std::string& color, const std::string& shape);
ParseTree count_tree(const std::string& color);
ParseTree compare_tree(const std::string& c1, const std::string& s1, const std::string& c2,
                       const std::string& s2);
ParseTree query_tree(const std::string& size, const std::string& shape);

struct QuestionRecord {
  ParseTree tree;           // tokens with POS tags and gold heads
  std::string template_id;  // family name
  std::string answer;
  int scene_id = 0;
};

const std::vector<std::string>& answer_vocab();  // 15 answers, fixed order
int answer_index(const std::string& a);          // throws ParseError on unknown
std::vector<std::string> question_lexicon();     // every word a template can emit
const std::set<std::string>& cogent_keep_pos();  // leaf-POS keep set for pruning

// Re-derives the template semantics from the tokens and recounts over the
// scene. Throws ParseError on an unrecognized template and Error on a QUERY
// without a unique referent.
std::string answer_oracle(const SceneSpec& scene, const ParseTree& tree);

// Samples a question of the given family about an existing scene; nullopt
// when the family does not apply (QUERY without a unique referent, COMPARE
// without two referable groups).
std::optional<QuestionRecord> gen_question(const SceneSpec& scene, Family fam, Rng& rng);

struct Dataset {
  Condition cond = Condition::kA;
  std::uint64_t seed = 0;
  std::vector<SceneSpec> scenes;  // scenes[i] belongs to records[i]
  std::vector<QuestionRecord> records;
};

// Balanced generation: families cycle exactly, and within each family the
// answer slot cycles (yes/no for EXIST and COMPARE, 0-4 for COUNT, the 8
// colors for QUERY), so no family has a majority-class shortcut.
Dataset gen_dataset(int n, Condition cond, std::uint64_t seed);

// Returns the number of records violating any of: valid tree, answer ==
// answer_oracle, palette constraint, token budget. 0 means the set is clean.
int self_check(const Dataset& ds);

// Directory layout: manifest.txt (format version, counts, condition, seed),
// images.u8 (concatenated channel-planar 8-bit frames), questions.jsonl
// (id/scene/template/answer), trees.jsonl (parse-tree file). Scenes are
// recovered from the images on read.
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

}  // namespace lgcaps
