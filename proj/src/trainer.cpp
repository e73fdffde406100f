#include "affkit/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "affkit/augment.hpp"
#include "affkit/fileio.hpp"

namespace fs = std::filesystem;

namespace affkit::trainer {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(std::string_view key, std::string_view text) {
  N v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
    throw ValidationError("config key " + std::string(key) + ": cannot parse '" + std::string(text) + "'");
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ValidationError("config key " + std::string(key) + ": expected true/false, got '" + std::string(text) + "'");
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto end = comma == std::string_view::npos ? text.size() : comma;
    out.push_back(parse_number<std::size_t>(key, trim(text.substr(start, end - start))));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

using Setter = std::function<void(TrainConfig&, std::string_view key, std::string_view value)>;
using Getter = std::function<std::string(const TrainConfig&)>;

struct Field {
  std::string_view key;
  Setter set;
  Getter get;
};

template <class N>
Field number_field(std::string_view key, N TrainConfig::*member) {
  return {key, [member](TrainConfig& c, auto k, auto v) { c.*member = parse_number<N>(k, v); },
          [member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<N>)
              return format_roundtrip(c.*member);
            else
              return std::to_string(c.*member);
          }};
}

Field string_field(std::string_view key, std::string TrainConfig::*member) {
  return {key, [member](TrainConfig& c, auto, auto v) { c.*member = std::string(v); },
          [member](const TrainConfig& c) { return c.*member; }};
}

Field bool_field(std::string_view key, bool TrainConfig::*member) {
  return {key, [member](TrainConfig& c, auto k, auto v) { c.*member = parse_bool(k, v); },
          [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"task", [](TrainConfig& c, auto, auto v) { c.task = data::parse_task(v); },
       [](const TrainConfig& c) { return std::string(data::task_name(c.task)); }},
      number_field("epochs", &TrainConfig::epochs),
      number_field("batch_size", &TrainConfig::batch_size),
      number_field("base_lr", &TrainConfig::base_lr),
      string_field("optimizer", &TrainConfig::optimizer),
      number_field("momentum", &TrainConfig::momentum),
      string_field("schedule", &TrainConfig::schedule),
      number_field("smoothing", &TrainConfig::smoothing),
      bool_field("class_weights", &TrainConfig::class_weights),
      number_field("seed", &TrainConfig::seed),
      bool_field("deviation", &TrainConfig::deviation),
      string_field("pretrained", &TrainConfig::pretrained),
      number_field("slots", &TrainConfig::slots),
      number_field("input_size", &TrainConfig::input_size),
      {"channels", [](TrainConfig& c, auto k, auto v) { c.channels = parse_list(k, v); },
       [](const TrainConfig& c) { return join(c.channels); }},
      number_field("feature_dim", &TrainConfig::feature_dim),
      number_field("eval_every", &TrainConfig::eval_every),
      string_field("out_dir", &TrainConfig::out_dir),
      string_field("val_manifest", &TrainConfig::val_manifest),
      string_field("resume", &TrainConfig::resume),
      bool_field("keep_snapshots", &TrainConfig::keep_snapshots),
  };
  return f;
}

std::string fixed_or_none(const std::optional<double>& v) { return v ? format_fixed6(*v) : "none"; }

}  // namespace

const std::vector<std::string_view>& config_keys() {
  static const std::vector<std::string_view> keys = [] {
    std::vector<std::string_view> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void TrainConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields())
    if (f.key == key) {
      f.set(*this, key, value);
      return;
    }
  throw ValidationError("unknown config key '" + std::string(key) + "'");
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

TrainConfig TrainConfig::from_text(std::string_view text, const std::string& source) {
  TrainConfig cfg;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    try {
      if (eq == std::string::npos) throw ValidationError("expected key=value");
      cfg.set(trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig TrainConfig::from_file(const fs::path& path) { return from_text(read_file_text(path), path.string()); }

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (eval_every < 1) throw ValidationError("eval_every must be >= 1");
  if (!(base_lr >= 0) || !std::isfinite(base_lr)) throw ValidationError("base_lr must be a finite value >= 0");
  if (schedule != "cosine" && schedule != "constant")
    throw ValidationError("unknown schedule '" + schedule + "' (expected cosine or constant)");
  optim::parse_kind(optimizer);
  if (!(momentum >= 0 && momentum < 1)) throw ValidationError("momentum must be in [0,1)");
  losses::SmoothingConfig{smoothing, data::num_classes(task)}.validate();
  if (deviation && pretrained.empty() && resume.empty())
    throw ValidationError("deviation mode needs a pretrained checkpoint");
  if (out_dir.empty()) throw ValidationError("out_dir must not be empty");
  model_spec().validate();
}

model::ModelSpec TrainConfig::model_spec() const {
  model::ModelSpec s;
  s.task = task;
  s.slots = slots;
  s.backbone = model::BackboneConfig{input_size, channels, feature_dim, seed};
  s.deviation = deviation;
  return s;
}

optim::Hyper TrainConfig::hyper() const {
  optim::Hyper h;
  h.kind = optim::parse_kind(optimizer);
  h.momentum = momentum;
  return h;
}

numkit::Tensor<float> Dataset::batch(std::span<const std::size_t> rows) const {
  const std::size_t per = 3 * input_size * input_size;
  std::vector<float> v(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw ValidationError("dataset row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(pixels.data() + rows[i] * per, per, v.data() + i * per);
  }
  return numkit::Tensor<float>({rows.size(), 3, input_size, input_size}, std::move(v));
}

std::vector<Image> load_images(std::span<const data::SampleRecord> records, const fs::path& base_dir) {
  std::vector<Image> images(records.size());
  std::vector<std::string> errors(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(records.size()); ++i) {
    try {
      images[std::size_t(i)] = read_png(base_dir / records[std::size_t(i)].image_path);
    } catch (const std::exception& e) {
      errors[std::size_t(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError(e);
  return images;
}

Dataset make_dataset(std::vector<data::SampleRecord> records, data::Task task, std::span<const Image> images,
                     const data::NormStats& stats, std::size_t input_size) {
  if (records.empty()) throw ValidationError("dataset is empty");
  if (images.size() != records.size())
    throw ValidationError(std::to_string(images.size()) + " images for " + std::to_string(records.size()) + " records");
  Dataset d;
  d.task = task;
  d.input_size = input_size;
  d.records = std::move(records);
  const std::size_t per = 3 * input_size * input_size;
  d.pixels.resize(d.records.size() * per);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(images.size()); ++i) {
    auto v = augment::preprocess(images[std::size_t(i)], stats, input_size);
    std::copy(v.begin(), v.end(), d.pixels.begin() + std::ptrdiff_t(std::size_t(i) * per));
  }
  return d;
}

LossWeights LossWeights::from_records(std::span<const data::SampleRecord> records, data::Task task,
                                      bool class_weights) {
  LossWeights w;
  if (class_weights) {
    w.expr = data::expr_class_weights(data::class_distribution(records, task));
  } else {
    w.expr.assign(data::num_classes(task), 1.0);
  }
  w.au.fill(1.0);
  if (task == data::Task::mtl) w.au = data::au_pos_weights(records);
  return w;
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  return (samples + batch_size - 1) / batch_size;
}

double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
  return cfg.schedule == "constant" ? cfg.base_lr : optim::cosine_lr(step, total_steps, cfg.base_lr);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(mix_seed(seed, 0x7261696eULL), epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

EpochStats train_epoch(TrainState& state, const Dataset& data, const TrainConfig& cfg, const LossWeights& weights) {
  if (data.size() == 0) throw ValidationError("cannot train on an empty dataset");
  EpochStats st;
  st.epoch = state.epoch + 1;
  const std::size_t spe = steps_per_epoch(data.size(), cfg.batch_size);
  const std::uint64_t total = std::uint64_t(spe) * cfg.epochs;
  const auto order = epoch_order(data.size(), cfg.seed, st.epoch);
  auto& m = state.model;
  std::size_t n_expr = 0, n_va = 0, n_au = 0;
  for (std::size_t b = 0; b < spe; ++b) {
    const std::size_t lo = b * cfg.batch_size, hi = std::min(data.size(), lo + cfg.batch_size);
    std::span<const std::size_t> rows(order.data() + lo, hi - lo);
    std::vector<data::SampleRecord> recs;
    recs.reserve(rows.size());
    for (auto r : rows) recs.push_back(data.records[r]);

    m.params.zero_grad();
    numkit::Tape<float> tape;
    auto p = m.params.watched(tape);
    auto out = model::forward_task(tape, m.spec, p, m.frozen, data.batch(rows), data.task);
    BatchLoss<float> loss;
    try {
      loss = compute_batch_losses(tape, out, recs, data.task, weights, cfg.smoothing);
    } catch (const ValidationError& e) {
      throw ValidationError("epoch " + std::to_string(st.epoch) + ", batch " + std::to_string(b) + ", task " +
                            std::string(data::task_name(data.task)) + ": " + e.what());
    }
    tape.backward(loss.total);
    const double lr = scheduled_lr(cfg, state.step, total);
    state.optimizer.step(m.params, lr);
    ++state.step;
    st.lr_trace.push_back(lr);
    st.loss += loss.parts.total;
    if (loss.labeled_expr) st.l_expr += loss.parts.l_expr, ++n_expr;
    if (loss.labeled_va) st.l_va += loss.parts.l_va, ++n_va;
    if (loss.labeled_au) st.l_au += loss.parts.l_au, ++n_au;
  }
  st.loss /= double(spe);
  if (n_expr) st.l_expr /= double(n_expr);
  if (n_va) st.l_va /= double(n_va);
  if (n_au) st.l_au /= double(n_au);
  state.epoch = st.epoch;
  return st;
}

Predictions predict(const model::Model<float>& m, const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  if (data.input_size != m.spec.backbone.input_size)
    throw ValidationError("dataset preprocessed at " + std::to_string(data.input_size) + "px, model expects " +
                          std::to_string(m.spec.backbone.input_size) + "px");
  Predictions p;
  p.task = data.task;
  p.rows = data.size();
  p.classes = data::num_classes(data.task);
  p.expr.resize(p.rows * p.classes);
  const bool mtl = data.task == data::Task::mtl;
  if (mtl) {
    p.va.resize(p.rows * 2);
    p.au.resize(p.rows * data::kNumAus);
  }
  std::vector<std::size_t> rows;
  for (std::size_t lo = 0; lo < p.rows; lo += batch_size) {
    const std::size_t hi = std::min(p.rows, lo + batch_size);
    rows.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) rows[i - lo] = i;
    auto out = model::forward_task(m, data.batch(rows), data.task);
    std::copy(out.expr.values().begin(), out.expr.values().end(), p.expr.begin() + std::ptrdiff_t(lo * p.classes));
    if (mtl) {
      std::copy(out.va->values().begin(), out.va->values().end(), p.va.begin() + std::ptrdiff_t(lo * 2));
      std::copy(out.au->values().begin(), out.au->values().end(), p.au.begin() + std::ptrdiff_t(lo * data::kNumAus));
    }
  }
  return p;
}

std::vector<metrics::MtlPrediction> decisions(const Predictions& p) {
  const auto cls = model::predict_classes<double>(p.expr, p.rows, p.classes);
  std::vector<metrics::MtlPrediction> out(p.rows);
  for (std::size_t i = 0; i < p.rows; ++i) out[i].expression = cls[i];
  if (p.task == data::Task::lsd) return out;
  const auto aus = model::predict_aus<double>(p.au, p.rows);
  for (std::size_t i = 0; i < p.rows; ++i) {
    out[i].valence = p.va[i * 2];
    out[i].arousal = p.va[i * 2 + 1];
    out[i].aus = aus[i];
  }
  return out;
}

metrics::MetricReport score(const Predictions& p, std::span<const data::SampleRecord> records) {
  if (records.size() != p.rows)
    throw ValidationError(std::to_string(p.rows) + " predictions for " + std::to_string(records.size()) + " records");
  const auto preds = decisions(p);
  if (p.task == data::Task::lsd) {
    std::vector<int> labels, cls;
    for (std::size_t i = 0; i < p.rows; ++i) {
      labels.push_back(records[i].expression);
      cls.push_back(preds[i].expression);
    }
    return metrics::evaluate_lsd(labels, cls);
  }
  return metrics::evaluate_mtl(records, preds);
}

double selection_score(const metrics::MetricReport& report) {
  return report.task == data::Task::mtl ? report.p_mtl : report.p_lsd;
}

std::string HistoryRow::to_line() const {
  return "epoch=" + std::to_string(epoch) + " lr=" + format_fixed6(lr) + " loss=" + format_fixed6(loss) +
         " l_expr=" + format_fixed6(l_expr) + " l_va=" + format_fixed6(l_va) + " l_au=" + format_fixed6(l_au) +
         " train_score=" + fixed_or_none(train_score) + " val_score=" + fixed_or_none(val_score);
}

HistoryRow HistoryRow::parse(std::string_view line) {
  HistoryRow row;
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < line.size()) {
    auto sp = line.find(' ', pos);
    if (sp == std::string_view::npos) sp = line.size();
    auto tok = line.substr(pos, sp - pos);
    pos = sp + 1;
    if (tok.empty()) continue;
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) throw ValidationError("bad history field '" + std::string(tok) + "'");
    kv[std::string(tok.substr(0, eq))] = std::string(tok.substr(eq + 1));
  }
  auto need = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ValidationError(std::string("history line lacks ") + k);
    return it->second;
  };
  auto opt = [&](const char* k) -> std::optional<double> {
    const auto& v = need(k);
    if (v == "none") return std::nullopt;
    return parse_number<double>(k, v);
  };
  row.epoch = parse_number<std::size_t>("epoch", need("epoch"));
  row.lr = parse_number<double>("lr", need("lr"));
  row.loss = parse_number<double>("loss", need("loss"));
  row.l_expr = parse_number<double>("l_expr", need("l_expr"));
  row.l_va = parse_number<double>("l_va", need("l_va"));
  row.l_au = parse_number<double>("l_au", need("l_au"));
  row.train_score = opt("train_score");
  row.val_score = opt("val_score");
  return row;
}

checkpoint::Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg, const data::NormStats& stats,
                                       double best_score, std::size_t best_epoch) {
  checkpoint::Checkpoint ck;
  checkpoint::store_model(ck, state.model);
  checkpoint::store_norm_stats(ck, stats);
  state.optimizer.store(ck);
  ck.set_meta("epoch", std::to_string(state.epoch));
  ck.set_meta("step", std::to_string(state.step));
  ck.set_meta("best_score", format_roundtrip(best_score));
  ck.set_meta("best_epoch", std::to_string(best_epoch));
  // Where the run writes and what it resumed from do not affect the math.
  for (const auto& f : fields())
    if (f.key != "out_dir" && f.key != "resume" && f.key != "keep_snapshots")
      ck.set_meta("config." + std::string(f.key), f.get(cfg));
  return ck;
}

std::vector<HistoryRow> HistoryRow::parse_all(std::string_view text) {
  std::vector<HistoryRow> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    if (!line.empty()) rows.push_back(parse(line));
  }
  return rows;
}

namespace {

std::string history_text(const std::vector<HistoryRow>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.to_line() + "\n";
  return s;
}

std::vector<HistoryRow> read_history(const fs::path& path, std::size_t up_to_epoch) {
  std::vector<HistoryRow> rows;
  if (!fs::exists(path)) return rows;
  for (auto& row : HistoryRow::parse_all(read_file_text(path)))
    if (row.epoch <= up_to_epoch) rows.push_back(row);
  return rows;
}

std::size_t meta_size(const checkpoint::Checkpoint& ck, const std::string& key) {
  return parse_number<std::size_t>(key, ck.require_meta(key));
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const fs::path& manifest) {
  cfg.validate();
  auto records = data::parse_manifest(manifest, cfg.task);
  if (records.empty()) throw ValidationError(manifest.string() + ": no records to train on");
  const fs::path base = manifest.parent_path();
  const fs::path out_dir = cfg.out_dir;
  const auto images = load_images(records, base);

  std::optional<TrainState> state;
  data::NormStats stats;
  double best_score = -1;
  std::size_t best_epoch = 0;
  if (!cfg.resume.empty()) {
    const auto ck = checkpoint::load(cfg.resume);
    auto m = checkpoint::restore_model(ck);
    if (m.spec.task != cfg.task)
      throw ValidationError(cfg.resume + ": checkpoint task is " + std::string(data::task_name(m.spec.task)));
    auto s = checkpoint::restore_norm_stats(ck);
    if (!s) throw ValidationError(cfg.resume + ": checkpoint has no normalization stats");
    stats = *s;
    optim::Optimizer opt(cfg.hyper(), m.params);
    opt.restore(ck);
    state.emplace(TrainState{std::move(m), std::move(opt), meta_size(ck, "epoch"), meta_size(ck, "step")});
    best_score = parse_number<double>("best_score", ck.require_meta("best_score"));
    best_epoch = meta_size(ck, "best_epoch");
  } else if (cfg.deviation) {
    const auto ck = checkpoint::load(cfg.pretrained);
    const auto pre = checkpoint::restore_model(ck);
    auto s = checkpoint::restore_norm_stats(ck);
    stats = s ? *s : data::normalization_stats(images);
    auto m = model::deviation_model(pre, mix_seed(cfg.seed, 2), cfg.task, cfg.slots);
    optim::Optimizer opt(cfg.hyper(), m.params);
    state.emplace(TrainState{std::move(m), std::move(opt), 0, 0});
  } else {
    stats = data::normalization_stats(images);
    auto m = model::init_model<float>(cfg.model_spec());
    optim::Optimizer opt(cfg.hyper(), m.params);
    state.emplace(TrainState{std::move(m), std::move(opt), 0, 0});
  }
  const std::size_t S = state->model.spec.backbone.input_size;
  const auto weights = LossWeights::from_records(records, cfg.task, cfg.class_weights);
  const auto train = make_dataset(std::move(records), cfg.task, images, stats, S);

  std::optional<Dataset> val;
  if (!cfg.val_manifest.empty()) {
    const fs::path vpath = cfg.val_manifest;
    auto vrec = data::parse_manifest(vpath, cfg.task);
    const auto vimg = load_images(vrec, vpath.parent_path());
    val = make_dataset(std::move(vrec), cfg.task, vimg, stats, S);
  }

  fs::create_directories(out_dir);
  FitResult result;
  result.history = read_history(out_dir / "history.txt", state->epoch);
  if (result.history.size() != state->epoch) result.history.clear();

  while (state->epoch < cfg.epochs) {
    auto st = train_epoch(*state, train, cfg, weights);
    HistoryRow row;
    row.epoch = st.epoch;
    row.lr = st.lr_trace.back();
    row.loss = st.loss;
    row.l_expr = st.l_expr;
    row.l_va = st.l_va;
    row.l_au = st.l_au;
    const bool evaluate = st.epoch % cfg.eval_every == 0 || st.epoch == cfg.epochs;
    bool improved = false;
    if (evaluate) {
      row.train_score = selection_score(score(predict(state->model, train), train.records));
      if (val) row.val_score = selection_score(score(predict(state->model, *val), val->records));
      const double s = val ? *row.val_score : *row.train_score;
      if (best_epoch == 0 || s > best_score) {
        best_score = s;
        best_epoch = st.epoch;
        improved = true;
      }
    }
    result.history.push_back(row);
    result.epochs.push_back(std::move(st));

    const auto ck = make_checkpoint(*state, cfg, stats, best_score, best_epoch);
    if (improved) checkpoint::save(out_dir / "best.afkt", ck);
    checkpoint::save(out_dir / "last.afkt", ck);
    if (cfg.keep_snapshots) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.afkt", state->epoch);
      checkpoint::save(out_dir / name, ck);
    }
    write_file_atomic(out_dir / "history.txt", history_text(result.history));
  }
  result.model = std::move(state->model);
  result.best_score = best_score;
  result.best_epoch = best_epoch;
  return result;
}

}  // namespace affkit::trainer
