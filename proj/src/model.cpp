#include "lgcaps/model.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lgcaps {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string("config: ") + what + " must be >= 1");
  };
  positive(n_q_max, "n_q_max");
  positive(L, "L");
  positive(n_caps, "n_caps");
  positive(ch, "ch");
  positive(cls_ch, "cls_ch");
  positive(cls_hidden, "cls_hidden");
  positive(T, "T");
  if (n_answers < 2) throw ConfigError("config: n_answers must be >= 2");
  if (w_pair < 0.0) throw ConfigError("config: w_pair must be >= 0");
  if (enc.ch != ch)
    throw ConfigError("config: encoder ch " + std::to_string(enc.ch) + " != capsule ch " +
                      std::to_string(ch));
  if (enc.n_q_max != n_q_max)
    throw ConfigError("config: encoder n_q_max " + std::to_string(enc.n_q_max) +
                      " != n_q_max " + std::to_string(n_q_max));
  if (enc.vocab < 1) throw ConfigError("config: vocab size not set");
}

std::vector<std::pair<std::string, std::string>> config_kv(const ModelConfig& cfg) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"n_q_max", std::to_string(cfg.n_q_max)},
      {"L", std::to_string(cfg.L)},
      {"n_caps", std::to_string(cfg.n_caps)},
      {"ch", std::to_string(cfg.ch)},
      {"cls_ch", std::to_string(cfg.cls_ch)},
      {"cls_hidden", std::to_string(cfg.cls_hidden)},
      {"n_answers", std::to_string(cfg.n_answers)},
      {"mode", to_string(cfg.mode)},
      {"T", std::to_string(cfg.T)},
      {"w_pair", num(cfg.w_pair)},
      {"enc.d_e", std::to_string(cfg.enc.d_e)},
      {"enc.d_h", std::to_string(cfg.enc.d_h)},
      {"enc.d_f", std::to_string(cfg.enc.d_f)},
      {"enc.img_c", std::to_string(cfg.enc.img_c)},
      {"enc.img_hw", std::to_string(cfg.enc.img_hw)},
      {"enc.fmap_c", std::to_string(cfg.enc.fmap_c)},
      {"enc.fmap_hw", std::to_string(cfg.enc.fmap_hw)},
      {"enc.vocab", std::to_string(cfg.enc.vocab)},
  };
}

void register_model_params(ParamStore& store, const ModelConfig& cfg) {
  cfg.validate();
  register_encoder_params(store, cfg.enc);
  for (int l = 0; l < cfg.L; ++l) {
    const int n_in = l == 0 ? cfg.n_q_max : cfg.n_caps;
    register_capsule_layer(store, "cap" + std::to_string(l), n_in, cfg.n_caps, cfg.ch, cfg.mode);
  }
  const int concat_ch = cfg.n_caps * cfg.ch;
  store.add("cls.conv.w", Shape{cfg.cls_ch, concat_ch}, concat_ch);
  store.add("cls.conv.b", Shape{cfg.cls_ch}, 0);
  store.add("cls.fc1.w", Shape{cfg.cls_ch, cfg.cls_hidden}, cfg.cls_ch);
  store.add("cls.fc1.b", Shape{cfg.cls_hidden}, 0);
  store.add("cls.fc2.w", Shape{cfg.cls_hidden, cfg.n_answers}, cfg.cls_hidden);
  store.add("cls.fc2.b", Shape{cfg.n_answers}, 0);
}

Ref classify(BoundParams& P, const ModelConfig& cfg, Ref x_top) {
  Tape& t = *P.tape;
  const Tensor& xv = t.value(x_top);
  if (xv.rank() != 4 || xv.dim(0) != cfg.n_caps || xv.dim(1) != cfg.ch)
    throw ShapeError("classify: want (" + std::to_string(cfg.n_caps) + "," +
                     std::to_string(cfg.ch) + ",h,w), got " + shape_str(xv.shape()));
  const int hw = xv.dim(2) * xv.dim(3);
  // capsule-major channel concatenation is a flat reshape
  Ref xm = reshape(x_top, Shape{cfg.n_caps * cfg.ch, hw});
  Ref conv = relu(add_colvec(matmul(P["cls.conv.w"], xm), P["cls.conv.b"]));
  Ref pooled = mean_lastdim(conv);
  Ref h1 = relu(add(vecmat(pooled, P["cls.fc1.w"]), P["cls.fc1.b"]));
  return add(vecmat(h1, P["cls.fc2.w"]), P["cls.fc2.b"]);
}

Ref model_forward(BoundParams& P, const ModelConfig& cfg, const Tensor& image,
                  const AlignedLayout& aligned, const Vocab& vocab, ForwardTrace* trace) {
  cfg.validate();
  Tape& t = *P.tape;
  if (aligned.layout.H != cfg.L)
    throw ConfigError("model_forward: layout depth " + std::to_string(aligned.layout.H) +
                      " != L " + std::to_string(cfg.L));
  if (static_cast<int>(aligned.tokens.size()) != cfg.n_q_max)
    throw ConfigError("model_forward: aligned token count " +
                      std::to_string(aligned.tokens.size()) + " != n_q_max " +
                      std::to_string(cfg.n_q_max));

  InputCapsules ic = build_input_capsules(P, image, aligned, vocab, cfg.enc);
  const int s = cfg.enc.fmap_hw;
  std::vector<Ref> slabs;
  slabs.reserve(ic.X.size());
  for (Ref x : ic.X) slabs.push_back(reshape(x, Shape{1, cfg.ch, s, s}));

  CapsuleState state;
  state.X = concat(slabs, 0);
  state.C = t.constant(ic.C0);
  state.mask = ic.mask;
  if (trace != nullptr) {
    trace->c0 = ic.C0.clone();
    trace->mask0 = ic.mask;
    trace->layers.assign(static_cast<std::size_t>(cfg.L), LayerTrace{});
  }

  for (int l = 0; l < cfg.L; ++l) {
    Tensor gp = correlation_matrix(aligned.layout, l + 1);
    LayerTrace* lt = trace != nullptr ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
    state = capsule_layer_forward(P, "cap" + std::to_string(l), state, gp, cfg.mode, cfg.T,
                                  cfg.w_pair, lt);
  }
  return classify(P, cfg, state.X);
}

Ref model_loss(Ref logits, int answer) { return cross_entropy(logits, answer); }

// ---- checkpoints ----

namespace {

constexpr const char* kMagic = "lgcaps-checkpoint v1";

void write_f64(std::ostream& os, const double* p, std::size_t n) {
  static_assert(sizeof(double) == 8);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 8));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t u;
      std::memcpy(&u, p + i, 8);
      char b[8];
      for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((u >> (8 * k)) & 0xff);
      os.write(b, 8);
    }
  }
}

void read_f64(std::istream& is, double* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 8));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      char b[8];
      is.read(b, 8);
      std::uint64_t u = 0;
      for (int k = 0; k < 8; ++k)
        u |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[k])) << (8 * k);
      std::memcpy(p + i, &u, 8);
    }
  }
}

std::string next_line(std::istream& is, const std::string& path) {
  std::string line;
  if (!std::getline(is, line)) throw IoError(path + ": truncated checkpoint header");
  return line;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& store,
                     const CheckpointExtras* extras) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os << kMagic << "\n";

  const auto kv = config_kv(cfg);
  os << "config " << kv.size() << "\n";
  for (const auto& [k, v] : kv) os << k << " " << v << "\n";

  os << "params " << store.count() << "\n";
  for (const auto& name : store.names()) {
    const Tensor& v = store.get(name);
    os << name << " " << v.rank();
    for (int d = 0; d < v.rank(); ++d) os << " " << v.dim(d);
    os << "\n";
  }

  const CheckpointExtras none;
  const CheckpointExtras& ex = extras != nullptr ? *extras : none;
  os << "extra " << ex.arrays.size() << "\n";
  for (const auto& [k, arr] : ex.arrays) os << k << " " << arr.size() << "\n";
  os << "meta " << ex.meta.size() << "\n";
  for (const auto& [k, v] : ex.meta) os << k << " " << v << "\n";

  os << "payload\n";
  for (const auto& name : store.names()) {
    const Tensor& v = store.get(name);
    write_f64(os, v.data(), static_cast<std::size_t>(v.numel()));
  }
  for (const auto& [k, arr] : ex.arrays) write_f64(os, arr.data(), arr.size());
  if (!os) throw IoError("write failed: " + path);
}

void load_checkpoint(const std::string& path, const ModelConfig& cfg, ParamStore& store,
                     CheckpointExtras* extras) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint: " + path);
  if (next_line(is, path) != kMagic) throw IoError(path + ": not a checkpoint (bad magic)");

  const auto want_kv = config_kv(cfg);
  std::istringstream hdr(next_line(is, path));
  std::string word;
  std::size_t n = 0;
  hdr >> word >> n;
  if (word != "config") throw IoError(path + ": malformed header (expected config)");
  if (n != want_kv.size())
    throw IoError(path + ": config has " + std::to_string(n) + " keys, expected " +
                  std::to_string(want_kv.size()));
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream line(next_line(is, path));
    std::string k, v;
    line >> k >> v;
    if (k != want_kv[i].first || v != want_kv[i].second)
      throw IoError(path + ": config mismatch at " + k + "=" + v + " (expected " +
                    want_kv[i].first + "=" + want_kv[i].second + ")");
  }

  std::istringstream phdr(next_line(is, path));
  phdr >> word >> n;
  if (word != "params") throw IoError(path + ": malformed header (expected params)");
  if (n != store.count())
    throw IoError(path + ": manifest has " + std::to_string(n) + " parameters, store has " +
                  std::to_string(store.count()));
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream line(next_line(is, path));
    std::string name;
    int rank = 0;
    line >> name >> rank;
    if (name != store.names()[i])
      throw IoError(path + ": manifest parameter " + name + " != registered " +
                    store.names()[i]);
    const Tensor& t = store.get(name);
    if (rank != t.rank()) throw IoError(path + ": rank mismatch for " + name);
    for (int d = 0; d < rank; ++d) {
      int dim = -1;
      line >> dim;
      if (dim != t.dim(d)) throw IoError(path + ": shape mismatch for " + name);
    }
  }

  std::istringstream ehdr(next_line(is, path));
  ehdr >> word >> n;
  if (word != "extra") throw IoError(path + ": malformed header (expected extra)");
  std::vector<std::pair<std::string, std::size_t>> extra_dir;
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream line(next_line(is, path));
    std::string k;
    std::size_t len = 0;
    line >> k >> len;
    extra_dir.emplace_back(k, len);
  }

  std::istringstream mhdr(next_line(is, path));
  mhdr >> word >> n;
  if (word != "meta") throw IoError(path + ": malformed header (expected meta)");
  std::vector<std::pair<std::string, std::string>> meta;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string line = next_line(is, path);
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos) throw IoError(path + ": malformed meta line");
    meta.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }

  if (next_line(is, path) != "payload") throw IoError(path + ": missing payload marker");

  for (const auto& name : store.names()) {
    Tensor& t = store.get(name);
    read_f64(is, t.data(), static_cast<std::size_t>(t.numel()));
    if (!is) throw IoError(path + ": truncated payload at " + name);
  }

  CheckpointExtras loaded;
  for (const auto& [k, len] : extra_dir) {
    std::vector<double> arr(len);
    read_f64(is, arr.data(), len);
    if (!is) throw IoError(path + ": truncated payload at extra " + k);
    loaded.arrays.emplace_back(k, std::move(arr));
  }
  loaded.meta = std::move(meta);
  if (extras != nullptr) *extras = std::move(loaded);
}

}  // namespace lgcaps
