#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lgcaps/linglayout.hpp"
#include "lgcaps/params.hpp"
#include "lgcaps/tape.hpp"

// Layer-0 capsule construction: CNN image features, bidirectional GRU word
// encodings, and low-rank bilinear fusion of the two.

namespace lgcaps {

struct EncoderDims {
  int n_q_max = 8;
  int d_e = 32;       // word embedding size
  int d_h = 32;       // GRU hidden size per direction
  int d_f = 32;       // bilinear fusion rank
  int ch = 16;        // capsule feature channels
  int img_c = 3;
  int img_hw = 32;    // square input images
  int fmap_c = 32;    // CNN output channels
  int fmap_hw = 8;    // CNN output spatial size
  int vocab = 0;      // embedding rows; set from the lexicon
  int d_w() const { return 2 * d_h; }  // per-word encoding (two directions)
};

// Closed word list; row 0 is the out-of-vocabulary token.
struct Vocab {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  static Vocab build(std::vector<std::string> lexicon);  // sorted + deduped
  int lookup(const std::string& w) const;
  int size() const { return static_cast<int>(words.size()); }
};

void register_encoder_params(ParamStore& store, const EncoderDims& d);

// Five 3x3 convolutions (channels 8,16,16,32,32; strides 2,1,2,1,1) with
// relu, (3,32,32) -> (32,8,8) at the defaults.
Ref cnn_features(BoundParams& P, Ref image, const EncoderDims& d);

// Two constant channels: x (varies along width) then y, linspaced in [-1,1].
Tensor coord_channels(int h, int w);
Ref append_coords(Tape& tape, Ref fmap);

// One GRU cell shared by both directions, run over the given positions only.
// w[i] is the concatenation [forward_i; backward_i]; q = w.back().
struct GruOut {
  std::vector<Ref> w;
  Ref q;
};
GruOut gru_encode(BoundParams& P, const std::vector<Ref>& emb, const EncoderDims& d);

// Shared image branch of the fusion: tanh(conv3x3(fmap+coords) -> d_f).
Ref fuse_project(BoundParams& P, Ref fmap_coords, const EncoderDims& d);
// Per-word branch: tanh(P_w w + b) gates F channelwise; bias-free 1x1 conv
// to ch channels, so a zero word encoding (with zero P_w bias) yields zeros.
Ref fuse_word(BoundParams& P, Ref F, Ref w_enc, const EncoderDims& d);

struct InputCapsules {
  std::vector<Ref> X;       // n_q_max maps of (ch, s, s); masked slots are zero
  Tensor C0;                // n_q_max x n_q_max; one-hot rows for kept words
  std::vector<char> mask;   // 1 = kept (active capsule)
  Ref q;                    // question vector; exposed, unused by the model
};

InputCapsules build_input_capsules(BoundParams& P, const Tensor& image,
                                   const AlignedLayout& aligned, const Vocab& vocab,
                                   const EncoderDims& d);

}  // namespace lgcaps
