#include "lgcaps/encoders.hpp"

#include <algorithm>

namespace lgcaps {

Vocab Vocab::build(std::vector<std::string> lexicon) {
  std::sort(lexicon.begin(), lexicon.end());
  lexicon.erase(std::unique(lexicon.begin(), lexicon.end()), lexicon.end());
  Vocab v;
  v.words.push_back("<oov>");
  for (auto& w : lexicon)
    if (w != "<oov>") v.words.push_back(std::move(w));
  for (std::size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int>(i);
  return v;
}

int Vocab::lookup(const std::string& w) const {
  auto it = index.find(w);
  return it == index.end() ? 0 : it->second;
}

namespace {

constexpr int kCnnCh[5] = {8, 16, 16, 32, 32};
constexpr int kCnnStride[5] = {2, 1, 2, 1, 1};

}  // namespace

void register_encoder_params(ParamStore& s, const EncoderDims& d) {
  int ci = d.img_c;
  for (int l = 0; l < 5; ++l) {
    const std::string base = "cnn.conv" + std::to_string(l + 1);
    s.add(base + ".w", Shape{kCnnCh[l], ci, 3, 3}, ci * 9);
    s.add(base + ".b", Shape{kCnnCh[l]}, 0);
    ci = kCnnCh[l];
  }
  s.add("embed.E", Shape{d.vocab, d.d_e}, d.d_e);
  for (const char* g : {"r", "z", "n"}) {
    s.add(std::string("gru.W") + g, Shape{d.d_e, d.d_h}, d.d_e);
    s.add(std::string("gru.U") + g, Shape{d.d_h, d.d_h}, d.d_h);
    s.add(std::string("gru.bw") + g, Shape{d.d_h}, 0);
    s.add(std::string("gru.bu") + g, Shape{d.d_h}, 0);
  }
  s.add("fuse.proj.w", Shape{d.d_f, d.fmap_c + 2, 3, 3}, (d.fmap_c + 2) * 9);
  s.add("fuse.proj.b", Shape{d.d_f}, 0);
  s.add("fuse.Pw.w", Shape{d.d_w(), d.d_f}, d.d_w());
  s.add("fuse.Pw.b", Shape{d.d_f}, 0);
  s.add("fuse.out.w", Shape{d.ch, d.d_f, 1, 1}, d.d_f);  // bias-free on purpose
}

Ref cnn_features(BoundParams& P, Ref image, const EncoderDims& d) {
  const Tensor& img = P.tape->value(image);
  if (img.rank() != 3 || img.dim(0) != d.img_c || img.dim(1) != d.img_hw ||
      img.dim(2) != d.img_hw)
    throw ShapeError("cnn_features: want (" + std::to_string(d.img_c) + "," +
                     std::to_string(d.img_hw) + "," + std::to_string(d.img_hw) + "), got " +
                     shape_str(img.shape()));
  Ref x = image;
  for (int l = 0; l < 5; ++l) {
    const std::string base = "cnn.conv" + std::to_string(l + 1);
    x = relu(conv2d(x, P[base + ".w"], P[base + ".b"], kCnnStride[l], 1));
  }
  return x;
}

Tensor coord_channels(int h, int w) {
  Tensor c(Shape{2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      c.at(0, y, x) = (w > 1) ? -1.0 + 2.0 * x / (w - 1) : 0.0;
      c.at(1, y, x) = (h > 1) ? -1.0 + 2.0 * y / (h - 1) : 0.0;
    }
  return c;
}

Ref append_coords(Tape& tape, Ref fmap) {
  const Tensor& f = tape.value(fmap);
  if (f.rank() != 3) throw ShapeError("append_coords: want rank 3, got " + shape_str(f.shape()));
  Ref coords = tape.constant(coord_channels(f.dim(1), f.dim(2)));
  return concat({fmap, coords}, 0);
}

namespace {

// One GRU step: h' = (1-z) * n + z * h.
Ref gru_step(BoundParams& P, Ref x, Ref h) {
  Ref r = sigmoid(add(add(vecmat(x, P["gru.Wr"]), P["gru.bwr"]),
                      add(vecmat(h, P["gru.Ur"]), P["gru.bur"])));
  Ref z = sigmoid(add(add(vecmat(x, P["gru.Wz"]), P["gru.bwz"]),
                      add(vecmat(h, P["gru.Uz"]), P["gru.buz"])));
  Ref n = tanh(add(add(vecmat(x, P["gru.Wn"]), P["gru.bwn"]),
                   mul(r, add(vecmat(h, P["gru.Un"]), P["gru.bun"]))));
  return add(mul(one_minus(z), n), mul(z, h));
}

}  // namespace

GruOut gru_encode(BoundParams& P, const std::vector<Ref>& emb, const EncoderDims& d) {
  if (emb.empty()) throw ShapeError("gru_encode: empty sequence");
  const int n = static_cast<int>(emb.size());
  Tape& t = *P.tape;
  Ref h0 = t.constant(Tensor(Shape{d.d_h}));
  std::vector<Ref> fwd(static_cast<std::size_t>(n)), bwd(static_cast<std::size_t>(n));
  Ref h = h0;
  for (int i = 0; i < n; ++i) {
    h = gru_step(P, emb[static_cast<std::size_t>(i)], h);
    fwd[static_cast<std::size_t>(i)] = h;
  }
  h = h0;
  for (int i = n - 1; i >= 0; --i) {
    h = gru_step(P, emb[static_cast<std::size_t>(i)], h);
    bwd[static_cast<std::size_t>(i)] = h;
  }
  GruOut out;
  out.w.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.w.push_back(concat({fwd[static_cast<std::size_t>(i)], bwd[static_cast<std::size_t>(i)]}, 0));
  out.q = out.w.back();
  return out;
}

Ref fuse_project(BoundParams& P, Ref fmap_coords, const EncoderDims& d) {
  const Tensor& f = P.tape->value(fmap_coords);
  if (f.dim(0) != d.fmap_c + 2)
    throw ShapeError("fuse_project: want " + std::to_string(d.fmap_c + 2) + " channels, got " +
                     shape_str(f.shape()));
  return tanh(conv2d(fmap_coords, P["fuse.proj.w"], P["fuse.proj.b"], 1, 1));
}

Ref fuse_word(BoundParams& P, Ref F, Ref w_enc, const EncoderDims& d) {
  const Tensor& f = P.tape->value(F);
  if (f.dim(0) != d.d_f)
    throw ShapeError("fuse_word: want " + std::to_string(d.d_f) + " channels, got " +
                     shape_str(f.shape()));
  const int h = f.dim(1), w = f.dim(2);
  Ref gate = tanh(add(vecmat(w_enc, P["fuse.Pw.w"]), P["fuse.Pw.b"]));
  Ref gated = mul(F, broadcast_chan(gate, h, w));
  return conv2d(gated, P["fuse.out.w"], Ref{}, 1, 0);
}

InputCapsules build_input_capsules(BoundParams& P, const Tensor& image,
                                   const AlignedLayout& aligned, const Vocab& vocab,
                                   const EncoderDims& d) {
  const int n = d.n_q_max;
  if (static_cast<int>(aligned.tokens.size()) != n || aligned.layout.n_q != n)
    throw ShapeError("build_input_capsules: layout length " +
                     std::to_string(aligned.tokens.size()) + " vs n_q_max " + std::to_string(n));
  Tape& t = *P.tape;
  Ref img = t.constant(image);
  Ref fmap = append_coords(t, cnn_features(P, img, d));
  Ref F = fuse_project(P, fmap, d);

  // GRU runs over the real tokens (pruned words included; padding skipped).
  std::vector<Ref> emb;
  for (int i = aligned.shift; i < n; ++i) {
    const int row = vocab.lookup(aligned.tokens[static_cast<std::size_t>(i)].text);
    emb.push_back(reshape(rows_select(P["embed.E"], {row}), Shape{d.d_e}));
  }
  GruOut enc = gru_encode(P, emb, d);

  InputCapsules caps;
  caps.q = enc.q;
  caps.mask.assign(static_cast<std::size_t>(n), 0);
  caps.C0 = Tensor(Shape{n, n});
  Ref zero_map = t.constant(Tensor(Shape{d.ch, d.fmap_hw, d.fmap_hw}));
  caps.X.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Token& tok = aligned.tokens[static_cast<std::size_t>(i)];
    if (tok.pruned) {
      caps.X[static_cast<std::size_t>(i)] = zero_map;
      continue;
    }
    caps.mask[static_cast<std::size_t>(i)] = 1;
    caps.C0.at(i, i) = 1.0;
    caps.X[static_cast<std::size_t>(i)] =
        fuse_word(P, F, enc.w[static_cast<std::size_t>(i - aligned.shift)], d);
  }
  return caps;
}

}  // namespace lgcaps
