#include "msadgn/trainer.hpp"

#include "msadgn/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace msadgn {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- ablations -------------------------------------------------------------

std::string to_string(Ablation a) { return "M" + std::to_string(static_cast<int>(a)); }

Ablation parse_ablation(std::string_view name) {
  if (name.size() == 2 && (name[0] == 'M' || name[0] == 'm') && name[1] >= '1' && name[1] <= '7') {
    return static_cast<Ablation>(name[1] - '0');
  }
  throw ConfigError("unknown ablation variant '" + std::string(name) + "' (expected M1..M7)");
}

AblationSwitches switches_for(Ablation a) {
  AblationSwitches s;
  switch (a) {
    case Ablation::M1:
      s = {false, false, false, false, false, false};
      break;
    case Ablation::M2:
      s.similarity = false;
      s.dynamic_threshold = false;
      s.global_iteration = false;
      break;
    case Ablation::M3:
      s.dynamic_threshold = false;
      break;
    case Ablation::M4:
      s.global_iteration = false;
      break;
    case Ablation::M5:
      s.invariant = false;
      break;
    case Ablation::M6:
      s.specific = false;
      break;
    case Ablation::M7:
      break;
  }
  return s;
}

// ---- config ----------------------------------------------------------------

void TrainConfig::validate() const {
  const auto sw = switches_for(ablation);
  if (K < 1) throw ConfigError("K must be >= 1");
  if ((sw.invariant || sw.pseudolabels) && K < 2) throw ConfigError(to_string(ablation) + " needs K >= 2");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
  if (decay_epochs < 1) throw ConfigError("decay_epochs must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  if (!(fixed_threshold >= 0.0 && fixed_threshold <= 1.0)) throw ConfigError("fixed_threshold must be in [0, 1]");
  if (!(similarity_temperature > 0.0)) throw ConfigError("similarity_temperature must be > 0");
  if (!(network.init_std >= 0.0)) throw ConfigError("init_std must be >= 0");
  if (network.hidden.size() != 2) throw ConfigError("heads have exactly two hidden layers");
  network.embedding_dim();
}

PredictMode TrainConfig::predict_mode() const {
  return switches_for(ablation).specific ? PredictMode::Weighted : PredictMode::FirstClassifier;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"K", c.K},
           {"num_classes", c.num_classes},
           {"network",
            {{"signal_len", c.network.signal_len},
             {"channels", c.network.channels},
             {"kernel", c.network.kernel},
             {"stride", c.network.stride},
             {"pad", c.network.pad},
             {"hidden", c.network.hidden},
             {"init_std", c.network.init_std}}},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"lr_decay", c.lr_decay},
           {"decay_epochs", c.decay_epochs},
           {"alpha", c.alpha},
           {"fixed_threshold", c.fixed_threshold},
           {"similarity_temperature", c.similarity_temperature},
           {"seed", c.seed},
           {"ablation", to_string(c.ablation)}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  try {
    c.K = j.value("K", d.K);
    c.num_classes = j.value("num_classes", d.num_classes);
    if (j.contains("network")) {
      const json& n = j.at("network");
      c.network.signal_len = n.value("signal_len", d.network.signal_len);
      c.network.channels = n.value("channels", d.network.channels);
      c.network.kernel = n.value("kernel", d.network.kernel);
      c.network.stride = n.value("stride", d.network.stride);
      c.network.pad = n.value("pad", d.network.pad);
      c.network.hidden = n.value("hidden", d.network.hidden);
      c.network.init_std = n.value("init_std", d.network.init_std);
    }
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.decay_epochs = j.value("decay_epochs", d.decay_epochs);
    c.alpha = j.value("alpha", d.alpha);
    c.fixed_threshold = j.value("fixed_threshold", d.fixed_threshold);
    c.similarity_temperature = j.value("similarity_temperature", d.similarity_temperature);
    c.seed = j.value("seed", d.seed);
    c.ablation = parse_ablation(j.value("ablation", to_string(d.ablation)));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  TrainConfig cfg = j.get<TrainConfig>();
  cfg.validate();
  return cfg;
}

void save_config(const TrainConfig& cfg, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write config " + path.string());
  out << json(cfg).dump(2) << '\n';
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : json(cfg).dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (epoch < 1) throw ParameterError("learning_rate: epochs are counted from 1");
  return cfg.lr * std::pow(cfg.lr_decay, (epoch - 1) / cfg.decay_epochs);
}

void ProgressClock::tick() {
  if (step >= batches_per_epoch) {
    ++epoch;
    step = 0;
  }
  ++step;
}

double ProgressClock::progress() const {
  const double total = static_cast<double>(total_epochs) * batches_per_epoch;
  const double done = static_cast<double>(epoch - 1) * batches_per_epoch + step;
  return std::clamp(done / total, 0.0, 1.0);
}

Model build_networks(const TrainConfig& cfg) {
  cfg.validate();
  return make_model(cfg.network, cfg.K, cfg.num_classes, cfg.seed);
}

// ---- Adam ------------------------------------------------------------------

void adam_step(Tensor& param, const Vector& grad, AdamSlot& slot, double lr, const AdamHyper& h) {
  if (grad.size() != param.size()) {
    throw ContractError("adam_step: gradient has " + std::to_string(grad.size()) + " entries, parameter " +
                        std::to_string(param.size()));
  }
  if (slot.m.size() != param.size()) {
    slot.m = Vector::Zero(param.size());
    slot.v = Vector::Zero(param.size());
  }
  ++slot.t;
  slot.m = h.beta1 * slot.m + (1.0 - h.beta1) * grad;
  slot.v = h.beta2 * slot.v + (1.0 - h.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(slot.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(slot.t));
  param.mutable_data().array() -= lr * (slot.m.array() / c1) / ((slot.v.array() / c2).sqrt() + h.eps);
}

Adam::Adam(std::vector<Tensor> params, AdamHyper hyper)
    : params_(std::move(params)), slots_(params_.size()), hyper_(hyper) {}

void Adam::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (p.has_grad()) {
      adam_step(p, p.grad(), slots_[i], lr, hyper_);
    } else {
      adam_step(p, Vector::Zero(p.size()), slots_[i], lr, hyper_);
    }
    p.zero_grad();
  }
}

// ---- step ------------------------------------------------------------------

std::vector<Tensor> shared_embeddings(const Model& model, std::span<const Tensor> signals) {
  const Tensor all = model.shared.forward(concat_rows(signals));
  std::vector<Tensor> out;
  Index start = 0;
  for (const auto& s : signals) {
    std::vector<Index> rows(static_cast<std::size_t>(s.dim(0)));
    std::iota(rows.begin(), rows.end(), start);
    out.push_back(gather_rows(all, rows));
    start += s.dim(0);
  }
  return out;
}

StepLosses compute_losses(const Model& model, const TrainConfig& cfg, const StepInputs& inputs,
                          std::span<const Tensor> embeddings, double lambda) {
  const auto sw = switches_for(cfg.ablation);
  if (static_cast<int>(embeddings.size()) != cfg.K || static_cast<int>(inputs.signals.size()) != cfg.K) {
    throw ContractError("compute_losses: expected " + std::to_string(cfg.K) + " domain batches");
  }
  StepLosses out;
  out.invariant = Tensor::scalar(0.0);
  out.weight = Tensor::scalar(0.0);
  if (sw.invariant) {
    InvariantLoss inv = domain_invariant_loss(embeddings, model.discriminators, lambda);
    out.invariant = inv.value;
    out.adversarial = std::move(inv.report);
  }

  std::vector<LabeledEmbeddings> labeled;
  labeled.push_back({1, embeddings[0], inputs.labels});
  if (sw.pseudolabels) {
    for (int k = 2; k <= cfg.K; ++k) {
      const auto idx = static_cast<std::size_t>(k - 1);
      if (idx >= inputs.pseudolabels.size() || inputs.pseudolabels[idx].size() == 0) continue;
      const PseudolabelBatch& sel = inputs.pseudolabels[idx];
      labeled.push_back({sw.specific ? k : 1, gather_rows(embeddings[idx], sel.selected_indices), sel.labels});
    }
  }
  ClassificationLoss cls = classification_loss(labeled, model.classifiers);
  out.classification = cls.value;
  out.contributing_domains = cls.contributing_domains;

  if (sw.specific) out.weight = weight_branch_loss(inputs.signals, model.weighted, model.weighted_classifier);
  out.total = add(add(out.invariant, out.classification), out.weight);
  return out;
}

std::vector<PseudolabelBatch> select_step_pseudolabels(const Model& model, const TrainConfig& cfg,
                                                       std::span<const Tensor> embeddings,
                                                       const PrototypeState& prototypes, double tau) {
  const auto sw = switches_for(cfg.ablation);
  std::vector<PseudolabelBatch> out(static_cast<std::size_t>(cfg.K));
  if (!sw.pseudolabels) return out;
  for (int k = 2; k <= cfg.K; ++k) {
    const Tensor& emb = embeddings[static_cast<std::size_t>(k - 1)];
    const Tensor phi = probability_score(emb, model.classifiers.front());
    const Tensor psi = sw.similarity ? similarity_score(emb, prototypes, cfg.similarity_temperature) : phi;
    out[static_cast<std::size_t>(k - 1)] = select_pseudolabels(pseudolabel_score(phi, psi, cfg.alpha), tau);
  }
  return out;
}

// ---- training loop ---------------------------------------------------------

TrainResult train(const TrainConfig& cfg, std::span<const DomainDataset> sources, const StepCallback& on_step) {
  cfg.validate();
  if (static_cast<int>(sources.size()) != cfg.K) {
    throw DataError("train: config expects " + std::to_string(cfg.K) + " source domains, got " +
                    std::to_string(sources.size()));
  }
  const auto first_labels = sources[0].labels();
  if (!first_labels) throw DataError("train: the first source domain must be labeled");
  for (const auto& s : sources) {
    if (s.length() != cfg.network.signal_len) {
      throw DataError("train: domain " + std::to_string(s.domain_id()) + " has signal length " +
                      std::to_string(s.length()) + ", config expects " + std::to_string(cfg.network.signal_len));
    }
    if (s.size() < 1) throw DataError("train: domain " + std::to_string(s.domain_id()) + " is empty");
  }
  const Index m = cfg.batch_size;
  const Index n_labeled = sources[0].size();
  if (n_labeled < m) throw ConfigError("train: labeled domain smaller than one batch");

  const auto sw = switches_for(cfg.ablation);
  TrainResult result;
  result.model = build_networks(cfg);
  Model& model = result.model;
  Adam adam(model.parameters());
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  PrototypeState& prototypes = result.prototypes;
  if (sw.similarity) prototypes = init_prototypes(sources[0], model.shared, cfg.num_classes);

  ProgressClock clock;
  clock.batches_per_epoch = static_cast<int>(n_labeled / m);
  clock.total_epochs = cfg.epochs;

  std::vector<Index> order(static_cast<std::size_t>(n_labeled));
  std::iota(order.begin(), order.end(), Index{0});
  long step_index = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<EpochAudit> audit(static_cast<std::size_t>(cfg.K));

    for (int b = 0; b < clock.batches_per_epoch; ++b) {
      clock.tick();
      ++step_index;
      const double p = clock.progress();
      const double tau = sw.dynamic_threshold ? dynamic_threshold(p) : cfg.fixed_threshold;
      const double lambda = lambda_schedule(p);

      std::vector<std::vector<Index>> rows(static_cast<std::size_t>(cfg.K));
      rows[0].assign(order.begin() + b * m, order.begin() + (b + 1) * m);
      for (int k = 1; k < cfg.K; ++k) {
        std::uniform_int_distribution<Index> pick(0, sources[static_cast<std::size_t>(k)].size() - 1);
        auto& r = rows[static_cast<std::size_t>(k)];
        r.resize(static_cast<std::size_t>(m));
        for (auto& v : r) v = pick(rng);
      }

      StepInputs inputs;
      for (int k = 0; k < cfg.K; ++k) {
        inputs.signals.push_back(sources[static_cast<std::size_t>(k)].batch(rows[static_cast<std::size_t>(k)]));
      }
      for (Index i : rows[0]) inputs.labels.push_back((*first_labels)[static_cast<std::size_t>(i)]);

      StepLog entry;
      entry.step = step_index;
      entry.epoch = epoch;
      entry.progress = p;
      entry.tau = tau;
      entry.lambda = lambda;
      entry.lr = lr;

      try {
        const std::vector<Tensor> embeddings = shared_embeddings(model, inputs.signals);
        if (sw.pseudolabels) {
          if (sw.similarity && !sw.global_iteration) {
            prototypes = local_prototypes(prototypes, Matrix(embeddings[0].mat()), inputs.labels);
          }
          inputs.pseudolabels = select_step_pseudolabels(model, cfg, embeddings, prototypes, tau);
        }
        StepLosses losses = compute_losses(model, cfg, inputs, embeddings, lambda);
        entry.loss_inv = losses.invariant.item();
        entry.loss_cls = losses.classification.item();
        entry.loss_w = losses.weight.item();
        entry.loss = losses.total.item();
        entry.pair_losses = losses.adversarial.per_pair_losses;
        if (!std::isfinite(entry.loss)) throw NumericError("non-finite loss");
        backward(losses.total);
      } catch (const NumericError& e) {
        throw NumericError("train: step " + std::to_string(step_index) + ": " + e.what());
      }
      adam.step(lr);

      if (sw.similarity && sw.global_iteration) {
        prototypes = update_prototypes(prototypes, inputs.signals[0], inputs.labels, model.shared);
      }
      entry.rho = sw.similarity ? prototypes.last_rho : 1.0;

      entry.selected.push_back(static_cast<int>(m));
      for (int k = 2; k <= cfg.K; ++k) {
        const auto idx = static_cast<std::size_t>(k - 1);
        const PseudolabelBatch* sel = idx < inputs.pseudolabels.size() ? &inputs.pseudolabels[idx] : nullptr;
        entry.selected.push_back(sel ? static_cast<int>(sel->size()) : 0);
        if (!sel) continue;
        const auto hidden = sources[idx].audit_labels();
        audit[idx].selected += static_cast<long>(sel->size());
        if (!hidden) continue;
        for (std::size_t i = 0; i < sel->size(); ++i) {
          const Index row = rows[idx][static_cast<std::size_t>(sel->selected_indices[i])];
          if ((*hidden)[static_cast<std::size_t>(row)] == sel->labels[i]) ++audit[idx].correct;
        }
      }
      if (on_step) on_step(entry);
      result.log.steps.push_back(std::move(entry));
    }
    for (int k = 2; k <= cfg.K; ++k) {
      EpochAudit a = audit[static_cast<std::size_t>(k - 1)];
      a.epoch = epoch;
      a.domain = k;
      result.log.audits.push_back(a);
    }
  }
  return result;
}

void write_step_log_csv(const TrainLog& log, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  const std::size_t domains = log.steps.empty() ? 0 : log.steps.front().selected.size();
  const std::size_t pairs = log.steps.empty() ? 0 : log.steps.front().pair_losses.size();
  out << "step,epoch,p,tau,lambda,lr,L_inv,L_cls,L_w,L,rho";
  for (std::size_t k = 0; k < domains; ++k) out << ",m_" << (k + 1);
  for (std::size_t d = 0; d < pairs; ++d) out << ",pair_" << (d + 1);
  out << '\n';
  for (const auto& s : log.steps) {
    out << s.step << ',' << s.epoch << ',' << s.progress << ',' << s.tau << ',' << s.lambda << ',' << s.lr << ','
        << s.loss_inv << ',' << s.loss_cls << ',' << s.loss_w << ',' << s.loss << ',' << s.rho;
    for (int v : s.selected) out << ',' << v;
    for (double v : s.pair_losses) out << ',' << v;
    out << '\n';
  }
}

void write_audit_csv(const TrainLog& log, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,domain,selected,accuracy\n";
  for (const auto& a : log.audits) {
    out << a.epoch << ',' << a.domain << ',' << a.selected << ',';
    if (a.selected > 0) {
      out << static_cast<double>(a.correct) / static_cast<double>(a.selected);
    }
    out << '\n';
  }
}

// ---- checkpoints -----------------------------------------------------------

namespace {

void write_le_u64(std::ostream& out, std::uint64_t v) {
  std::array<unsigned char, 8> bytes;
  for (int i = 0; i < 8; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes.data()), 8);
}

std::uint64_t read_le_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), 8);
  if (!in) throw FormatError("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[static_cast<std::size_t>(i)];
  return v;
}

void swap_if_big_endian(Vector& v) {
  if constexpr (std::endian::native == std::endian::big) {
    for (Index i = 0; i < v.size(); ++i) {
      std::array<unsigned char, 8> b;
      std::memcpy(b.data(), &v[i], 8);
      std::reverse(b.begin(), b.end());
      std::memcpy(&v[i], b.data(), 8);
    }
  }
}

}  // namespace

void save_checkpoint(const Model& model, const TrainConfig& cfg, const fs::path& path) {
  const NamedTensors params = model.named_parameters();
  json header;
  header["format"] = kCheckpointFormat;
  header["config"] = cfg;
  header["tensors"] = json::array();
  for (const auto& [name, t] : params) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << kCheckpointFormat << '\n';
  write_le_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params) {
    Vector v = t.data();
    swap_if_big_endian(v);
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  }
  if (!out) throw DataError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointFormat) {
    throw FormatError("checkpoint: field 'format' is '" + magic.substr(0, 32) + "', expected " + kCheckpointFormat);
  }
  const std::uint64_t length = read_le_u64(in);
  if (length > (1u << 26)) throw FormatError("checkpoint: header length " + std::to_string(length) + " implausible");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw FormatError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (header.value("format", std::string()) != kCheckpointFormat) {
    throw FormatError("checkpoint: header field 'format' mismatch");
  }
  Checkpoint ck;
  ck.config = header.at("config").get<TrainConfig>();
  ck.config.validate();
  ck.model = build_networks(ck.config);
  NamedTensors params = ck.model.named_parameters();
  const json& manifest = header.at("tensors");
  if (manifest.size() != params.size()) {
    throw FormatError("checkpoint: field 'tensors' lists " + std::to_string(manifest.size()) +
                      " tensors, config implies " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto mname = manifest[i].value("name", std::string());
    const auto mshape = manifest[i].value("shape", Shape{});
    if (mname != name || mshape != t.shape()) {
      throw FormatError("checkpoint: tensor '" + mname + "' " + to_string(mshape) + " does not match '" + name +
                        "' " + to_string(t.shape()));
    }
    Vector& v = t.mutable_data();
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
    if (!in) throw FormatError("checkpoint: truncated data for tensor '" + name + "'");
    swap_if_big_endian(v);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after tensor data");
  return ck;
}

Checkpoint load_checkpoint(const fs::path& path, int expected_K) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.config.K != expected_K) {
    throw ConfigError("checkpoint was trained with K=" + std::to_string(ck.config.K) + ", expected K=" +
                      std::to_string(expected_K));
  }
  return ck;
}

}  // namespace msadgn
