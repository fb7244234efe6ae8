#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lgcaps/encoders.hpp"
#include "lgcaps/linglayout.hpp"
#include "lgcaps/params.hpp"
#include "lgcaps/routing.hpp"
#include "lgcaps/tape.hpp"

namespace lgcaps {

struct ModelConfig {
  int n_q_max = 8;
  int L = 4;        // capsule layers; must equal the aligned layout depth
  int n_caps = 8;   // capsules per upper layer
  int ch = 16;      // feature channels per capsule
  int cls_ch = 128;      // 1x1 conv width feeding the pooled classifier
  int cls_hidden = 128;  // classifier hidden width
  int n_answers = 15;
  RouteMode mode = RouteMode::kFull;
  int T = 3;
  double w_pair = 1.0;
  EncoderDims enc;

  void validate() const;  // throws ConfigError on inconsistent fields
};

// Deterministic key/value echo of a config; used for checkpoint headers and
// strict equality checks.
std::vector<std::pair<std::string, std::string>> config_kv(const ModelConfig& cfg);

// Registers every learnable tensor: encoders, L capsule layers (cap0..), and
// the classifier head. Parameter names and counts are a pure function of the
// config.
void register_model_params(ParamStore& store, const ModelConfig& cfg);

// Per-sample routing trace for the route-dump CLI.
struct ForwardTrace {
  Tensor c0;                       // layer-0 perception rows
  std::vector<char> mask0;
  std::vector<LayerTrace> layers;  // R and next-layer C per capsule layer
};

// Full forward pass: input capsules -> L routed layers -> answer logits.
Ref model_forward(BoundParams& P, const ModelConfig& cfg, const Tensor& image,
                  const AlignedLayout& aligned, const Vocab& vocab,
                  ForwardTrace* trace = nullptr);

// Classifier head on the top capsule state: channel concat, 1x1 conv to
// cls_ch, global average pool, two FC layers.
Ref classify(BoundParams& P, const ModelConfig& cfg, Ref x_top);

// Softmax cross-entropy.
Ref model_loss(Ref logits, int answer);

// ---- checkpoints ----
// Text header (format version, config echo, parameter manifest, extra-array
// and metadata directories) followed by raw little-endian f64 payloads in
// manifest order. Loading is strict: any config or manifest mismatch throws.

struct CheckpointExtras {
  std::vector<std::pair<std::string, std::vector<double>>> arrays;  // e.g. optimizer moments
  std::vector<std::pair<std::string, std::string>> meta;            // e.g. rng state
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& store,
                     const CheckpointExtras* extras = nullptr);
void load_checkpoint(const std::string& path, const ModelConfig& cfg, ParamStore& store,
                     CheckpointExtras* extras = nullptr);

}  // namespace lgcaps
