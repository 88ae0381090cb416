#pragma once

#include "msadgn/adversarial.hpp"
#include "msadgn/data.hpp"
#include "msadgn/networks.hpp"
#include "msadgn/pseudolabel.hpp"
#include "msadgn/specific.hpp"
#include "msadgn/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msadgn {

// Ablation variants. M1 is plain ERM on the labeled domain and M7 is the
// full method.
enum class Ablation { M1 = 1, M2, M3, M4, M5, M6, M7 };

std::string to_string(Ablation a);
Ablation parse_ablation(std::string_view name);

struct AblationSwitches {
  bool pseudolabels = true;       // use unlabeled domains through pseudolabels
  bool similarity = true;         // prototype similarity term in the score
  bool dynamic_threshold = true;  // otherwise the fixed threshold
  bool global_iteration = true;   // otherwise minibatch-local prototypes
  bool invariant = true;          // pairwise adversarial alignment
  bool specific = true;           // per-domain classifiers + weight branch
};

AblationSwitches switches_for(Ablation a);

struct TrainConfig {
  int K = 3;
  int num_classes = 3;
  NetworkShape network;
  int epochs = 50;
  Index batch_size = 32;
  double lr = 1e-4;
  double lr_decay = 0.5;
  int decay_epochs = 10;
  double alpha = 0.2;
  double fixed_threshold = 0.4;
  double similarity_temperature = 0.005;  // psi = softmax(cos / T)
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::M7;

  // Throws ConfigError on the first inconsistent field.
  void validate() const;
  PredictMode predict_mode() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);
TrainConfig load_config(const std::filesystem::path& path);
void save_config(const TrainConfig& cfg, const std::filesystem::path& path);
// FNV-1a of the canonical JSON form, hex encoded.
std::string config_hash(const TrainConfig& cfg);

// lr0 * decay^floor((epoch - 1) / decay_epochs), epochs counted from 1.
double learning_rate(const TrainConfig& cfg, int epoch);

// Training progress shared by the threshold and lambda schedules.
struct ProgressClock {
  int epoch = 1;              // n_e, 1-based
  int step = 0;               // s_e within the epoch, 1-based once ticking
  int batches_per_epoch = 1;  // L_e
  int total_epochs = 1;       // N_e

  // Moves to the next step, rolling over to the next epoch.
  void tick();
  double progress() const;
};

Model build_networks(const TrainConfig& cfg);

// ---- Adam ----------------------------------------------------------------

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamSlot {
  Vector m;
  Vector v;
  long t = 0;
};

void adam_step(Tensor& param, const Vector& grad, AdamSlot& slot, double lr, const AdamHyper& hyper = {});

// Adam over a fixed parameter list. Parameters without a gradient are
// stepped with a zero gradient. Gradients are cleared after each step.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamHyper hyper = {});
  void step(double lr);
  const std::vector<AdamSlot>& slots() const { return slots_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamSlot> slots_;
  AdamHyper hyper_;
};

// ---- one training step ---------------------------------------------------

struct StepInputs {
  std::vector<Tensor> signals;                 // per source domain, m x 1 x len
  std::vector<int> labels;                     // domain 1 labels
  std::vector<PseudolabelBatch> pseudolabels;  // per domain; entry 0 unused
};

struct StepLosses {
  Tensor total;
  Tensor invariant;
  Tensor classification;
  Tensor weight;
  AdversarialLossReport adversarial;
  int contributing_domains = 0;
};

// F_shared over all domains in one pass, split back per domain.
std::vector<Tensor> shared_embeddings(const Model& model, std::span<const Tensor> signals);

// L = L_inv + L_cls + L_w for the configured ablation. Pseudolabel
// selections are inputs, so the result is a smooth function of parameters.
StepLosses compute_losses(const Model& model, const TrainConfig& cfg, const StepInputs& inputs,
                          std::span<const Tensor> embeddings, double lambda);

// Runs pseudolabel selection for domains 2..K.
std::vector<PseudolabelBatch> select_step_pseudolabels(const Model& model, const TrainConfig& cfg,
                                                       std::span<const Tensor> embeddings,
                                                       const PrototypeState& prototypes, double tau);

// ---- full training -------------------------------------------------------

struct StepLog {
  long step = 0;
  int epoch = 0;
  double progress = 0.0;
  double tau = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  double loss_inv = 0.0;
  double loss_cls = 0.0;
  double loss_w = 0.0;
  double loss = 0.0;
  double rho = 1.0;
  std::vector<int> selected;  // m'_k per domain; entry 0 is the labeled batch size
  std::vector<double> pair_losses;
};

// Pseudolabel quality against hidden ground truth; never fed back.
struct EpochAudit {
  int epoch = 0;
  int domain = 0;
  long selected = 0;
  long correct = 0;
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<EpochAudit> audits;
};

struct TrainResult {
  Model model;
  TrainLog log;
  PrototypeState prototypes;
};

using StepCallback = std::function<void(const StepLog&)>;

TrainResult train(const TrainConfig& cfg, std::span<const DomainDataset> sources, const StepCallback& on_step = {});

void write_step_log_csv(const TrainLog& log, const std::filesystem::path& path);
void write_audit_csv(const TrainLog& log, const std::filesystem::path& path);

// ---- checkpoints ---------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "msadgn-ckpt-v1";

struct Checkpoint {
  Model model;
  TrainConfig config;
};

void save_checkpoint(const Model& model, const TrainConfig& cfg, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also rejects a checkpoint whose K differs from expected_K.
Checkpoint load_checkpoint(const std::filesystem::path& path, int expected_K);

}  // namespace msadgn
