#include "lgcaps/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "lgcaps/kernels.hpp"
#include "lgcaps/rng.hpp"

namespace lgcaps {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5148'55FFULL;  // epoch shuffles derive from this

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int family_index(const std::string& name) {
  const auto& fams = family_names();
  for (int i = 0; i < kNumFamilies; ++i)
    if (fams[static_cast<std::size_t>(i)] == name) return i;
  throw ConfigError("unknown template family '" + name + "'");
}

void accumulate(std::vector<Tensor>& acc, BoundParams& P, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor g = P.grad_of(names[i]);
    kernels::axpy(1.0, g.data(), acc[i].data(), static_cast<std::size_t>(g.numel()));
  }
}

}  // namespace

// ---- Adam ----

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("adam: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
  if (wd < 0.0) throw ConfigError("adam: weight decay must be non-negative");
}

void adam_init(AdamState& st, const ParamStore& store) {
  st.t = 0;
  st.m.assign(static_cast<std::size_t>(store.total_elems()), 0.0);
  st.v.assign(static_cast<std::size_t>(store.total_elems()), 0.0);
}

bool adam_step(ParamStore& store, const std::vector<Tensor>& grads, AdamState& st,
               const AdamConfig& cfg) {
  cfg.validate();
  const auto& names = store.names();
  if (grads.size() != names.size()) throw ShapeError("adam_step: gradient list length mismatch");
  std::int64_t total = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& p = store.get(names[i]);
    if (grads[i].shape() != p.shape())
      throw ShapeError("adam_step: gradient shape mismatch for " + names[i]);
    if (!grads[i].all_finite()) return false;  // abort, touch nothing
    total += p.numel();
  }
  if (st.m.size() != static_cast<std::size_t>(total) || st.v.size() != st.m.size())
    throw ShapeError("adam_step: state size mismatch");

  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  std::size_t off = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor& p = store.get(names[i]);
    const double* g = grads[i].data();
    double* pd = p.data();
    for (std::int64_t k = 0; k < p.numel(); ++k, ++off) {
      st.m[off] = cfg.beta1 * st.m[off] + (1.0 - cfg.beta1) * g[k];
      st.v[off] = cfg.beta2 * st.v[off] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = st.m[off] / bc1;
      const double vhat = st.v[off] / bc2;
      pd[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) + cfg.lr * cfg.wd * pd[k];
    }
  }
  return true;
}

// ---- config ----

void TrainConfig::validate() const {
  adam.validate();
  if (batch <= 0) throw ConfigError("train: batch must be positive");
  if (epochs <= 0) throw ConfigError("train: epochs must be positive");
  if (eval_every <= 0) throw ConfigError("train: eval_every must be positive");
  if (max_samples < 0) throw ConfigError("train: max_samples must be non-negative");
  if (T <= 0) throw ConfigError("train: T must be positive");
  if (w_pair < 0.0) throw ConfigError("train: w_pair must be non-negative");
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  TrainConfig tc;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    std::string val;
    if (!(ls >> val))
      throw ConfigError("config line " + std::to_string(lineno) + ": missing value for '" + key +
                        "'");
    try {
      if (key == "lr")
        tc.adam.lr = std::stod(val);
      else if (key == "beta1")
        tc.adam.beta1 = std::stod(val);
      else if (key == "beta2")
        tc.adam.beta2 = std::stod(val);
      else if (key == "eps")
        tc.adam.eps = std::stod(val);
      else if (key == "weight_decay")
        tc.adam.wd = std::stod(val);
      else if (key == "batch")
        tc.batch = std::stoi(val);
      else if (key == "epochs")
        tc.epochs = std::stoi(val);
      else if (key == "seed")
        tc.seed = std::stoull(val);
      else if (key == "mode")
        tc.mode = route_mode_from_string(val);
      else if (key == "T")
        tc.T = std::stoi(val);
      else if (key == "w_pair")
        tc.w_pair = std::stod(val);
      else if (key == "eval_every")
        tc.eval_every = std::stoi(val);
      else if (key == "max_samples")
        tc.max_samples = std::stoi(val);
      else if (key == "train")
        tc.train_dir = val;
      else if (key == "val_a")
        tc.val_a_dir = val;
      else if (key == "val_b")
        tc.val_b_dir = val;
      else if (key == "out")
        tc.out_dir = val;
      else if (key == "resume")
        tc.resume = val;
      else
        throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("config line " + std::to_string(lineno) + ": bad value '" + val +
                        "' for '" + key + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("config line " + std::to_string(lineno) + ": value out of range for '" +
                        key + "'");
    }
  }
  tc.validate();
  return tc;
}

// ---- data preparation and evaluation ----

std::vector<PreparedSample> prepare_samples(const Dataset& ds, const ModelConfig& cfg) {
  if (cfg.n_answers != static_cast<int>(answer_vocab().size()))
    throw ConfigError("model answer head size " + std::to_string(cfg.n_answers) +
                      " does not match the answer vocabulary (" +
                      std::to_string(answer_vocab().size()) + ")");
  std::vector<PreparedSample> out;
  out.reserve(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    if (rec.scene_id < 0 || rec.scene_id >= static_cast<int>(ds.scenes.size()))
      throw ConfigError("record " + std::to_string(i) + ": scene id out of range");
    if (rec.tree.n_q() > cfg.n_q_max)
      throw ConfigError("record " + std::to_string(i) + ": question longer than n_q_max");
    PreparedSample s;
    s.scene = ds.scenes[static_cast<std::size_t>(rec.scene_id)];
    const ParseTree pruned = prune_leaves(rec.tree, cogent_keep_pos());
    s.aligned = pad_align(build_layout(pruned, cfg.L), pruned, cfg.n_q_max, cfg.L);
    s.answer = answer_index(rec.answer);
    s.family = family_index(rec.template_id);
    out.push_back(std::move(s));
  }
  return out;
}

MetricsRecord evaluate(ParamStore& store, const ModelConfig& cfg,
                       const std::vector<PreparedSample>& samples, const Vocab& vocab) {
  MetricsRecord rec;
  std::array<int, kNumFamilies> hits{};
  double loss_sum = 0.0;
  for (const auto& s : samples) {
    Tape tape;
    BoundParams P(tape, store);
    const Ref logits = model_forward(P, cfg, render_scene(s.scene), s.aligned, vocab);
    loss_sum += tape.value(model_loss(logits, s.answer)).at(0);
    const Tensor& lv = tape.value(logits);
    int best = 0;
    for (int k = 1; k < cfg.n_answers; ++k)
      if (lv.at(k) > lv.at(best)) best = k;
    hits[static_cast<std::size_t>(s.family)] += best == s.answer;
    ++rec.family_n[static_cast<std::size_t>(s.family)];
  }
  rec.n = static_cast<int>(samples.size());
  int total_hits = 0;
  for (int f = 0; f < kNumFamilies; ++f) {
    total_hits += hits[static_cast<std::size_t>(f)];
    rec.family_acc[static_cast<std::size_t>(f)] =
        rec.family_n[static_cast<std::size_t>(f)] > 0
            ? hits[static_cast<std::size_t>(f)] /
                  static_cast<double>(rec.family_n[static_cast<std::size_t>(f)])
            : 0.0;
  }
  if (rec.n > 0) {
    rec.loss = loss_sum / rec.n;
    rec.acc = total_hits / static_cast<double>(rec.n);
  }
  return rec;
}

// ---- metrics CSV ----

void append_metrics_row(const std::string& path, const EpochRow& row) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write metrics '" + path + "'");
  if (fresh) out << kMetricsSchema << "\n" << kMetricsHeader << "\n";
  auto acc_or = [&](const MetricsRecord& m, double v) { return m.n > 0 ? v : -1.0; };
  out << row.epoch << ',' << fmt(row.train_loss) << ',' << fmt(acc_or(row.val_a, row.val_a.acc))
      << ',' << fmt(acc_or(row.val_b, row.val_b.acc));
  for (const auto* m : {&row.val_a, &row.val_b})
    for (int f = 0; f < kNumFamilies; ++f)
      out << ',' << fmt(acc_or(*m, m->family_acc[static_cast<std::size_t>(f)]));
  out << ',' << fmt(row.seconds) << "\n";
}

// ---- the loop ----

TrainResult train_loop(const TrainConfig& tc, ModelConfig mcfg, const Dataset& train,
                       const Dataset* val_a, const Dataset* val_b) {
  tc.validate();
  mcfg.mode = tc.mode;
  mcfg.T = tc.T;
  mcfg.w_pair = tc.w_pair;
  const Vocab vocab = Vocab::build(question_lexicon());
  mcfg.enc.vocab = vocab.size();
  mcfg.validate();

  std::vector<PreparedSample> train_s = prepare_samples(train, mcfg);
  const std::vector<PreparedSample> va_s = val_a ? prepare_samples(*val_a, mcfg)
                                                 : std::vector<PreparedSample>{};
  const std::vector<PreparedSample> vb_s = val_b ? prepare_samples(*val_b, mcfg)
                                                 : std::vector<PreparedSample>{};
  if (tc.max_samples > 0 && static_cast<int>(train_s.size()) > tc.max_samples)
    train_s.resize(static_cast<std::size_t>(tc.max_samples));
  if (train_s.empty()) throw ConfigError("train: no training samples");

  ParamStore store(tc.seed);
  register_model_params(store, mcfg);
  AdamState adam;
  adam_init(adam, store);
  int start_epoch = 0;  // completed epochs so far
  TrainResult res;

  if (!tc.resume.empty()) {
    CheckpointExtras extras;
    load_checkpoint(tc.resume, mcfg, store, &extras);
    for (auto& [key, arr] : extras.arrays) {
      if (key == "adam.m") adam.m = std::move(arr);
      if (key == "adam.v") adam.v = std::move(arr);
    }
    for (const auto& [key, val] : extras.meta) {
      if (key == "adam.t") adam.t = std::stoll(val);
      if (key == "epoch") start_epoch = std::stoi(val);
      if (key == "best_val_a") res.best_val_a = std::stod(val);
      if (key == "best_epoch") res.best_epoch = std::stoi(val);
    }
    if (adam.m.size() != static_cast<std::size_t>(store.total_elems()) ||
        adam.v.size() != adam.m.size())
      throw IoError("resume checkpoint: optimizer state does not match the parameter set");
  }

  const bool writing = !tc.out_dir.empty();
  if (writing) {
    std::filesystem::create_directories(tc.out_dir);
    res.best_path = (std::filesystem::path(tc.out_dir) / "best.ckpt").string();
    res.last_path = (std::filesystem::path(tc.out_dir) / "last.ckpt").string();
    res.metrics_path = (std::filesystem::path(tc.out_dir) / "metrics.csv").string();
  }
  auto save = [&](const std::string& path, int completed_epochs) {
    CheckpointExtras extras;
    extras.arrays.emplace_back("adam.m", adam.m);
    extras.arrays.emplace_back("adam.v", adam.v);
    extras.meta.emplace_back("adam.t", std::to_string(adam.t));
    extras.meta.emplace_back("epoch", std::to_string(completed_epochs));
    extras.meta.emplace_back("best_val_a", fmt(res.best_val_a));
    extras.meta.emplace_back("best_epoch", std::to_string(res.best_epoch));
    extras.meta.emplace_back("seed", std::to_string(tc.seed));
    save_checkpoint(path, mcfg, store, &extras);
  };

  const auto& names = store.names();
  std::vector<Tensor> grads;
  for (const auto& n : names) grads.emplace_back(store.get(n).shape());

  std::vector<int> order(train_s.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const Rng master(tc.seed);
  for (int epoch = start_epoch + 1; epoch <= tc.epochs; ++epoch) {
    const auto wall0 = std::chrono::steady_clock::now();
    // Each epoch's permutation depends only on (seed, epoch) so a resumed run
    // replays the exact batch order of an uninterrupted one.
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng = master.derive(kShuffleStream + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::int64_t counted = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(tc.batch)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(tc.batch));
      const double bs = static_cast<double>(end - at);
      for (auto& g : grads) std::fill(g.data(), g.data() + g.numel(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = at; k < end; ++k) {
        const auto& s = train_s[static_cast<std::size_t>(order[k])];
        Tape tape;
        BoundParams P(tape, store);
        const Ref loss =
            model_loss(model_forward(P, mcfg, render_scene(s.scene), s.aligned, vocab), s.answer);
        batch_loss += tape.value(loss).at(0);
        tape.backward(loss);
        accumulate(grads, P, names);
      }
      for (auto& g : grads) {
        double* gd = g.data();
        for (std::int64_t i = 0; i < g.numel(); ++i) gd[i] /= bs;
      }
      if (adam_step(store, grads, adam, tc.adam)) {
        loss_sum += batch_loss;
        counted += static_cast<std::int64_t>(end - at);
      } else {
        ++res.skipped_steps;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = counted > 0 ? loss_sum / static_cast<double>(counted)
                                 : std::numeric_limits<double>::quiet_NaN();
    const bool do_eval = epoch % tc.eval_every == 0 || epoch == tc.epochs;
    if (do_eval && !va_s.empty()) row.val_a = evaluate(store, mcfg, va_s, vocab);
    if (do_eval && !vb_s.empty()) row.val_b = evaluate(store, mcfg, vb_s, vocab);
    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();

    const bool tracked = row.val_a.n > 0;
    const bool improved = tracked ? row.val_a.acc > res.best_val_a : true;
    if (improved) {
      res.best_val_a = tracked ? row.val_a.acc : -1.0;
      res.best_epoch = epoch;
      if (writing) save(res.best_path, epoch);
    }
    if (writing) {
      save(res.last_path, epoch);
      append_metrics_row(res.metrics_path, row);
    }
    res.rows.push_back(row);
  }

  res.final_train = evaluate(store, mcfg, train_s, vocab);
  return res;
}

// ---- ablation ----

std::vector<AblateRow> ablate(const TrainConfig& base, const ModelConfig& mcfg,
                              const Dataset& train, const Dataset* val_a, const Dataset* val_b) {
  std::vector<AblateRow> rows;
  for (RouteMode mode :
       {RouteMode::kBaseline, RouteMode::kUnary, RouteMode::kUnaryBinary, RouteMode::kFull}) {
    TrainConfig tc = base;
    tc.mode = mode;
    if (!base.out_dir.empty())
      tc.out_dir = (std::filesystem::path(base.out_dir) / to_string(mode)).string();
    const TrainResult r = train_loop(tc, mcfg, train, val_a, val_b);
    AblateRow row;
    row.mode = mode;
    if (r.best_epoch > 0 && !r.rows.empty()) {
      for (const auto& er : r.rows)
        if (er.epoch == r.best_epoch) {
          row.val_a = er.val_a.n > 0 ? er.val_a.acc : -1.0;
          row.val_b = er.val_b.n > 0 ? er.val_b.acc : -1.0;
        }
    }
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblateRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write ablation table '" + path + "'");
  out << kAblationSchema << "\n";
  out << "mode,val_a_acc,val_b_acc\n";
  for (const auto& r : rows)
    out << to_string(r.mode) << ',' << fmt(r.val_a) << ',' << fmt(r.val_b) << "\n";
}

}  // namespace lgcaps
