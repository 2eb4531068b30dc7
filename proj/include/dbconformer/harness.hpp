#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <thread>
#include <vector>

#include "dbconformer/align.hpp"
#include "dbconformer/checkpoint.hpp"
#include "dbconformer/gradcheck.hpp"
#include "dbconformer/metrics.hpp"
#include "dbconformer/model.hpp"
#include "dbconformer/optim.hpp"
#include "dbconformer/run_config.hpp"
#include "dbconformer/runtime.hpp"
#include "dbconformer/splits.hpp"
#include "dbconformer/trialset.hpp"

namespace dbc {

// ---------------------------------------------------------------- training

/// Called with the training-set indices of every mini-batch before its step.
using BatchObserver = std::function<void(std::span<const std::size_t>)>;

struct TrainResult {
  DBConformer model;
  std::vector<double> epoch_loss;  // mean training loss of each epoch
};

/// Trains a fresh model on `train` for cfg.epochs epochs of seeded shuffled
/// mini-batches (last incomplete batch kept), Adam at cfg.lr, cross-entropy.
inline TrainResult train_one(const RunConfig& cfg, const TrialSet& train, std::uint64_t seed,
                             const BatchObserver& observe = {}) {
  if (train.empty()) throw EmptyInputError("train_one: empty training set");
  if (train.channels != cfg.model.channels || train.samples != cfg.model.samples) {
    throw DimensionError("train_one: data is " + std::to_string(train.channels) + "x" + std::to_string(train.samples) +
                         ", model expects " + std::to_string(cfg.model.channels) + "x" +
                         std::to_string(cfg.model.samples));
  }
  for (auto y : train.labels) {
    if (static_cast<std::size_t>(y) >= cfg.model.classes) {
      throw LabelError("train_one: label " + std::to_string(y) + " outside [0, " + std::to_string(cfg.model.classes) +
                       ")");
    }
  }
  TrainResult result{DBConformer(cfg.model, seed), {}};
  DBConformer& model = result.model;
  auto params = model.parameters();
  AdamState opt(params, cfg.lr);
  Rng dropout = Rng(seed).derive("dropout");
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle = Rng(seed).derive("shuffle", epoch);
    shuffle.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      if (observe) observe(idx);
      const Tensor x = train.batch(idx);
      const auto y = train.batch_labels(idx);
      model.zero_grad();
      Graph g;
      Tensor loss;
      {
        Graph::Scope s(g);
        loss = DBConformer::loss(model.forward(x, {Mode::train, &dropout}).logits, y);
      }
      const double value = loss.item();
      if (!std::isfinite(value)) throw DivergenceError(epoch, batch_index);
      g.backward(loss);
      adam_step(params, opt);
      loss_sum += value * static_cast<double>(idx.size());
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }
  return result;
}

struct Predictions {
  std::vector<int> labels;       // predicted class
  std::vector<double> positive;  // softmax probability of class 1
  std::vector<std::vector<double>> attention;  // per trial, empty without the spatial branch
};

/// Eval-mode forward over every trial, in batches.
inline Predictions predict(DBConformer& model, const TrialSet& set, std::size_t batch = 64) {
  if (set.channels != model.config().channels || set.samples != model.config().samples) {
    throw DimensionError("predict: data is " + std::to_string(set.channels) + "x" + std::to_string(set.samples) +
                         ", model expects " + std::to_string(model.config().channels) + "x" +
                         std::to_string(model.config().samples));
  }
  Predictions p;
  const std::size_t n = set.size(), K = model.config().classes;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    auto out = model.forward(set.batch(idx), {Mode::eval, nullptr});
    const Tensor prob = ops::softmax(out.logits, 1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k) {
        if (out.logits[b * K + k] > out.logits[b * K + best]) best = k;
      }
      p.labels.push_back(static_cast<int>(best));
      p.positive.push_back(prob[b * K + 1]);
      if (out.attention.defined()) {
        const std::size_t C = out.attention.dim(1);
        p.attention.emplace_back(out.attention.data().begin() + static_cast<std::ptrdiff_t>(b * C),
                                 out.attention.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * C));
      }
    }
  }
  return p;
}

inline MetricsReport evaluate(DBConformer& model, const TrialSet& set) {
  const auto p = predict(model, set);
  std::vector<int> truth(set.labels.begin(), set.labels.end());
  return make_report(p.labels, truth, model.config().classes == 2 ? std::span<const double>(p.positive)
                                                                  : std::span<const double>());
}

// ---------------------------------------------------------------- alignment per fold

/// Which trials fed which alignment reference, in update order.
struct EaAudit {
  std::map<std::uint32_t, std::vector<std::int64_t>> train_absorbed;  // per training subject
  std::vector<std::int64_t> test_absorbed;   // test subject's state, in update order
  std::vector<std::size_t> test_count_seen;  // state.count() when each test trial was aligned
};

/// Aligned data of one fold. train/test are in TrialRef order; test keeps arrival order.
struct PreparedFold {
  TrialSet train, test;
  std::vector<TrialRef> train_refs, test_refs;
  EaAudit audit;
};

namespace detail {

inline const TrialSet& subject_set(const std::vector<TrialSet>& sets, std::uint32_t id) {
  for (const auto& s : sets) {
    if (s.subject_id == id) return s;
  }
  throw LookupError("no data for subject " + std::to_string(id));
}

inline TrialSet empty_like(const TrialSet& s, std::uint32_t id) {
  TrialSet out;
  out.subject_id = id;
  out.sample_rate = s.sample_rate;
  out.channels = s.channels;
  out.samples = s.samples;
  return out;
}

inline void append(TrialSet& dst, const Matrix& x, std::int32_t label) {
  dst.chronological_index.push_back(static_cast<std::uint32_t>(dst.labels.size()));
  dst.labels.push_back(label);
  dst.data.insert(dst.data.end(), x.data(), x.data() + x.size());
}

}  // namespace detail

/// Builds the aligned train and test sets of one fold under the EA policy.
/// Training trials of each subject are aligned by a reference over that
/// subject's training trials (or all its trials with whole-subject scope).
/// Test trials arrive in order; the test reference starts from the first test
/// trial (or the first warmup_k) and absorbs each trial before aligning it.
inline PreparedFold prepare_fold(const RunConfig& cfg, const std::vector<TrialSet>& sets, const Fold& fold) {
  if (fold.test.empty()) throw EmptyInputError("prepare_fold: empty test side");
  PreparedFold out;
  out.train_refs = fold.train;
  out.test_refs = fold.test;
  const TrialSet& first = detail::subject_set(sets, fold.test.front().subject_id);
  out.train = detail::empty_like(first, 0);
  out.test = detail::empty_like(first, first.subject_id);
  const bool whole = cfg.ea.scope == EaConfig::Scope::whole_subject;

  std::map<std::uint32_t, std::vector<std::size_t>> train_by_subject;
  for (const auto& r : fold.train) train_by_subject[r.subject_id].push_back(r.index);
  std::map<std::uint32_t, AlignState> train_states;
  if (cfg.ea.enabled) {
    for (const auto& [id, idx] : train_by_subject) {
      const TrialSet& s = detail::subject_set(sets, id);
      AlignState st(s.channels);
      if (whole) {
        for (auto i : s.chronological_order()) st.update(s.trial(i), static_cast<std::int64_t>(i));
      } else {
        for (auto i : idx) st.update(s.trial(i), static_cast<std::int64_t>(i));
      }
      out.audit.train_absorbed[id] = st.absorbed_tags();
      train_states.emplace(id, std::move(st));
    }
  }
  for (const auto& r : fold.train) {
    const TrialSet& s = detail::subject_set(sets, r.subject_id);
    if (s.channels != first.channels || s.samples != first.samples) {
      throw DimensionError("subject " + std::to_string(r.subject_id) + " trial shape differs from the test subject");
    }
    const Matrix x = cfg.ea.enabled ? align(s.trial(r.index), train_states.at(r.subject_id)) : Matrix(s.trial(r.index));
    detail::append(out.train, x, s.labels[r.index]);
  }

  for (const auto& r : fold.test) {
    if (r.subject_id != first.subject_id) throw ContractError("prepare_fold: test side spans several subjects");
  }
  if (!cfg.ea.enabled) {
    for (const auto& r : fold.test) detail::append(out.test, first.trial(r.index), first.labels[r.index]);
    return out;
  }
  AlignState test_state(first.channels);
  if (whole) {
    for (auto i : first.chronological_order()) test_state.update(first.trial(i), static_cast<std::int64_t>(i));
  } else if (cfg.ea.test_init == EaConfig::TestInit::warmup) {
    const std::size_t k = std::min(cfg.ea.warmup_k, fold.test.size());
    for (std::size_t j = 0; j < k; ++j) {
      test_state.update(first.trial(fold.test[j].index), static_cast<std::int64_t>(fold.test[j].index));
    }
  }
  for (const auto& r : fold.test) {
    const bool seen = std::find(test_state.absorbed_tags().begin(), test_state.absorbed_tags().end(),
                                static_cast<std::int64_t>(r.index)) != test_state.absorbed_tags().end();
    if (!seen) test_state.update(first.trial(r.index), static_cast<std::int64_t>(r.index));
    out.audit.test_count_seen.push_back(test_state.count());
    detail::append(out.test, align(first.trial(r.index), test_state), first.labels[r.index]);
  }
  out.audit.test_absorbed = test_state.absorbed_tags();
  return out;
}

/// Aligns one subject's trials for standalone training: a single reference
/// over every trial. Identity copy with EA disabled.
inline TrialSet align_offline(const RunConfig& cfg, const TrialSet& set) {
  if (!cfg.ea.enabled) return set;
  if (set.empty()) throw EmptyInputError("align_offline: no trials");
  AlignState st(set.channels);
  for (std::size_t i = 0; i < set.size(); ++i) st.update(set.trial(i));
  TrialSet out = set;
  for (std::size_t i = 0; i < set.size(); ++i) out.trial(i) = align(set.trial(i), st);
  return out;
}

/// Aligns one subject's trials as a test stream under cfg.ea, in recording
/// order. Trials come back in that order.
inline TrialSet align_online(const RunConfig& cfg, const TrialSet& set) {
  Fold fold;
  for (auto i : set.chronological_order()) fold.test.push_back({set.subject_id, i});
  return prepare_fold(cfg, {set}, fold).test;
}

// ---------------------------------------------------------------- protocols

struct Unit {
  std::uint32_t subject = 0;  // test subject
  std::size_t fold = 0;
  Fold split;
};

inline std::vector<Unit> protocol_units(const RunConfig& cfg, const std::vector<TrialSet>& sets) {
  if (sets.empty()) throw EmptyInputError("no datasets given");
  std::vector<Unit> units;
  switch (cfg.protocol) {
    case Protocol::CO:
      for (const auto& s : sets) units.push_back({s.subject_id, 0, split_co(s).folds.front()});
      break;
    case Protocol::CV:
      for (const auto& s : sets) {
        auto plan = split_cv(s, cfg.cv_folds);
        for (std::size_t f = 0; f < plan.folds.size(); ++f) units.push_back({s.subject_id, f, plan.folds[f]});
      }
      break;
    case Protocol::LOSO:
      if (sets.size() < 2) throw ConfigError("LOSO needs at least 2 subjects, got " + std::to_string(sets.size()));
      for (const auto& s : sets) units.push_back({s.subject_id, 0, split_loso(sets, s.subject_id).folds.front()});
      break;
  }
  return units;
}

struct UnitRecord {
  std::uint64_t seed = 0;
  std::uint32_t subject = 0;
  std::size_t fold = 0;
  MetricsReport report;
  std::vector<double> epoch_loss;
  std::string checkpoint;
  double seconds = 0.0;
};

struct Aggregate {
  std::vector<double> per_seed;  // one value per configured seed
  MeanStd summary;
};

struct RunRecord {
  RunConfig config;
  std::vector<UnitRecord> units;  // seed-major, then unit order
  Aggregate accuracy;
  std::optional<Aggregate> f1, bca, auc;
  double seconds = 0.0;
};

/// Per seed: mean over folds within each subject, then over subjects; then
/// mean and population std over seeds. Empty when any unit lacks the metric.
inline std::optional<Aggregate> aggregate(const std::vector<UnitRecord>& units, const std::vector<std::uint64_t>& seeds,
                                          const std::function<std::optional<double>(const MetricsReport&)>& get) {
  Aggregate a;
  for (auto seed : seeds) {
    std::map<std::uint32_t, std::pair<double, std::size_t>> by_subject;
    for (const auto& u : units) {
      if (u.seed != seed) continue;
      const auto v = get(u.report);
      if (!v) return std::nullopt;
      auto& [sum, n] = by_subject[u.subject];
      sum += *v;
      ++n;
    }
    if (by_subject.empty()) throw ContractError("aggregate: no runs for seed " + std::to_string(seed));
    double total = 0.0;
    for (const auto& [id, sn] : by_subject) total += sn.first / static_cast<double>(sn.second);
    a.per_seed.push_back(total / static_cast<double>(by_subject.size()));
  }
  a.summary = mean_std(a.per_seed);
  return a;
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Observer that throws ContractError when a batch holds a trial of the fold's test side.
inline BatchObserver leakage_guard(const PreparedFold& pf) {
  auto test_side = std::make_shared<const std::set<TrialRef>>(pf.test_refs.begin(), pf.test_refs.end());
  return [test_side, refs = &pf.train_refs](std::span<const std::size_t> idx) {
    for (auto i : idx) {
      const TrialRef& r = (*refs)[i];
      if (test_side->contains(r)) {
        throw ContractError("leakage: training step consumed test trial " + std::to_string(r.index) + " of subject " +
                            std::to_string(r.subject_id));
      }
    }
  };
}

struct RunOptions {
  std::size_t threads = 0;  // 0: runtime::worker_threads()
  std::function<void(const UnitRecord&)> on_unit_done;
};

/// Trains and evaluates every (seed, unit) of the configured protocol.
/// Throws ContractError if a training step ever touches a test trial.
inline RunRecord run_protocol(const RunConfig& cfg, const std::vector<TrialSet>& sets, const RunOptions& opts = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : sets) {
    if (s.channels != cfg.model.channels || s.samples != cfg.model.samples) {
      throw ConfigError("subject " + std::to_string(s.subject_id) + " has " + std::to_string(s.channels) + "x" +
                        std::to_string(s.samples) + " trials, model config expects " +
                        std::to_string(cfg.model.channels) + "x" + std::to_string(cfg.model.samples));
    }
  }
  const auto units = protocol_units(cfg, sets);
  std::vector<PreparedFold> prepared(units.size());
  parallel_for(units.size(), opts.threads ? opts.threads : runtime::worker_threads(),
               [&](std::size_t u) { prepared[u] = prepare_fold(cfg, sets, units[u].split); });

  RunRecord rec;
  rec.config = cfg;
  rec.units.resize(cfg.seeds.size() * units.size());
  const bool save = cfg.save_checkpoints && !cfg.out_dir.empty();
  if (save) std::filesystem::create_directories(std::filesystem::path(cfg.out_dir) / "checkpoints");
  std::mutex done_mutex;
  parallel_for(rec.units.size(), opts.threads ? opts.threads : runtime::worker_threads(), [&](std::size_t k) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t seed = cfg.seeds[k / units.size()];
    const Unit& unit = units[k % units.size()];
    const PreparedFold& pf = prepared[k % units.size()];
    auto trained = train_one(cfg, pf.train, seed, leakage_guard(pf));
    UnitRecord& u = rec.units[k];
    u.seed = seed;
    u.subject = unit.subject;
    u.fold = unit.fold;
    u.report = evaluate(trained.model, pf.test);
    u.epoch_loss = std::move(trained.epoch_loss);
    if (save) {
      const auto path = std::filesystem::path(cfg.out_dir) / "checkpoints" /
                        ("seed" + std::to_string(seed) + "_subject" + std::to_string(unit.subject) + "_fold" +
                         std::to_string(unit.fold) + ".dbcf");
      save_checkpoint(path, trained.model);
      u.checkpoint = path.string();
    }
    u.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (opts.on_unit_done) {
      std::lock_guard lock(done_mutex);
      opts.on_unit_done(u);
    }
  });
  rec.accuracy = *aggregate(rec.units, cfg.seeds, [](const MetricsReport& r) { return std::optional(r.accuracy); });
  rec.f1 = aggregate(rec.units, cfg.seeds, [](const MetricsReport& r) { return r.f1; });
  rec.bca = aggregate(rec.units, cfg.seeds, [](const MetricsReport& r) { return r.bca; });
  rec.auc = aggregate(rec.units, cfg.seeds, [](const MetricsReport& r) { return r.auc; });
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline nlohmann::json to_json(const Aggregate& a) {
  return {{"per_seed", a.per_seed}, {"mean", a.summary.mean}, {"std", a.summary.std}};
}

/// Structured record; wall-clock fields are the only non-deterministic entries.
inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : r.units) {
    units.push_back({{"seed", u.seed},
                     {"subject", u.subject},
                     {"fold", u.fold},
                     {"metrics", to_json(u.report)},
                     {"epoch_loss", u.epoch_loss},
                     {"checkpoint", u.checkpoint},
                     {"seconds", u.seconds}});
  }
  nlohmann::json j{{"config", to_json(r.config)},
                   {"protocol", to_string(r.config.protocol)},
                   {"runs", units},
                   {"accuracy", to_json(r.accuracy)},
                   {"seconds", r.seconds}};
  if (r.config.all_metrics) {
    auto opt = [](const std::optional<Aggregate>& a) { return a ? to_json(*a) : nlohmann::json(nullptr); };
    j["f1"] = opt(r.f1);
    j["bca"] = opt(r.bca);
    j["auc"] = opt(r.auc);
  }
  return j;
}

/// Flat `key=value` summary: accuracy always, other metrics with cfg.all_metrics.
inline std::string to_kv(const RunRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << "protocol=" << to_string(r.config.protocol) << '\n' << "seeds=" << r.config.seeds.size() << '\n';
  auto put = [&](const std::string& name, const std::optional<Aggregate>& a) {
    if (!a) {
      os << name << ".mean=undefined\n" << name << ".std=undefined\n";
      return;
    }
    os << name << ".mean=" << a->summary.mean << '\n' << name << ".std=" << a->summary.std << '\n';
    for (std::size_t i = 0; i < a->per_seed.size(); ++i) {
      os << name << ".seed" << r.config.seeds[i] << '=' << a->per_seed[i] << '\n';
    }
  };
  put("accuracy", r.accuracy);
  if (r.config.all_metrics) {
    put("f1", r.f1);
    put("bca", r.bca);
    put("auc", r.auc);
  }
  return os.str();
}

// ---------------------------------------------------------------- attention export

struct AttentionTable {
  std::vector<std::int32_t> labels;
  std::vector<std::vector<double>> rows;  // [trial][channel], each sums to 1
  std::vector<double> mean;               // per channel
};

inline AttentionTable attention_scores(DBConformer& model, const TrialSet& set) {
  if (model.config().no_spatial_branch) throw ConfigError("attention export needs the spatial branch");
  if (set.empty()) throw EmptyInputError("attention export: no trials");
  auto p = predict(model, set);
  AttentionTable t;
  t.labels = set.labels;
  t.rows = std::move(p.attention);
  t.mean.assign(set.channels, 0.0);
  for (const auto& row : t.rows)
    for (std::size_t c = 0; c < row.size(); ++c) t.mean[c] += row[c];
  for (double& m : t.mean) m /= static_cast<double>(t.rows.size());
  return t;
}

/// Channels sorted by descending mean score.
inline std::vector<std::size_t> attention_ranking(const AttentionTable& t) {
  std::vector<std::size_t> order(t.mean.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return t.mean[a] > t.mean[b]; });
  return order;
}

/// CSV: header `trial,label,ch0..chC-1`, one row per trial, then a `mean` row.
inline void write_attention_csv(const std::filesystem::path& path, const AttentionTable& t) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.precision(17);
  f << "trial,label";
  for (std::size_t c = 0; c < t.mean.size(); ++c) f << ",ch" << c;
  f << '\n';
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    f << i << ',' << t.labels[i];
    for (double v : t.rows[i]) f << ',' << v;
    f << '\n';
  }
  f << "mean,";
  for (double v : t.mean) f << ',' << v;
  f << '\n';
}

// ---------------------------------------------------------------- gradient check

struct GradcheckReport {
  std::vector<BlockGradError> blocks;
  double max_error = 0.0;
  double threshold = 1e-4;
  bool pass() const { return max_error <= threshold; }
};

/// Full-model loss gradient vs central differences on a fixed random batch.
/// Dropout must be off.
inline GradcheckReport run_gradcheck(const ModelConfig& config, std::uint64_t seed,
                                     const std::vector<double>& steps = kModelCheckSteps, std::size_t batch = 4) {
  if (config.p_embed > 0.0 || config.p_enc > 0.0 || config.p_cls > 0.0) {
    throw ConfigError("gradient check needs dropout disabled");
  }
  DBConformer model(config, seed);
  Rng rng = Rng(seed).derive("gradcheck-input");
  Tensor x({batch, config.channels, config.samples});
  for (auto& v : x.data()) v = rng.normal();
  std::vector<int> y(batch);
  for (std::size_t i = 0; i < batch; ++i) y[i] = static_cast<int>(i % config.classes);
  auto f = [&] { return DBConformer::loss(model.forward(x, {Mode::train, nullptr}).logits, y); };
  GradcheckReport r;
  r.blocks = grad_check_blocks(f, model.named_parameters(), steps);
  for (const auto& b : r.blocks) r.max_error = std::max(r.max_error, b.max_rel_error);
  return r;
}

}  // namespace dbc
