#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "soe/common.hpp"
#include "soe/corpus.hpp"

namespace soe {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  double dropout = 0.1;
  int vocab_size = 0;
  int memory_len = 0;   // hidden states cached from prior chunks, per layer
  int max_seq_len = 512;

  int head_dim() const { return d_model / n_heads; }
  int pos_table_rows() const { return memory_len + max_seq_len; }
  void validate() const;

  std::string to_json_string() const;
  static ModelConfig from_json_string(const std::string& s);
};

// All learnable tensors. Biases are 1xN row matrices so the checkpoint and
// optimizer can treat every tensor uniformly through for_each_tensor.
struct Parameters {
  struct Layer {
    Mat ln1_g, ln1_b;
    Mat w_qkv, b_qkv;  // d_model x 3*d_model
    Mat w_o, b_o;
    Mat ln2_g, ln2_b;
    Mat w1, b1;  // d_model x d_ff
    Mat w2, b2;  // d_ff x d_model
  };

  Mat tok_emb;  // vocab x d_model
  Mat pos_emb;  // (memory_len + max_seq_len) x d_model
  std::vector<Layer> layers;
  Mat lnf_g, lnf_b;
  Mat w_out;  // d_model x vocab

  static Parameters shaped(const ModelConfig& cfg);   // zero-initialized
  void random_init(const ModelConfig& cfg, Rng& rng);

  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& lay = layers[l];
      fn(p + "ln1_g", lay.ln1_g);
      fn(p + "ln1_b", lay.ln1_b);
      fn(p + "w_qkv", lay.w_qkv);
      fn(p + "b_qkv", lay.b_qkv);
      fn(p + "w_o", lay.w_o);
      fn(p + "b_o", lay.b_o);
      fn(p + "ln2_g", lay.ln2_g);
      fn(p + "ln2_b", lay.ln2_b);
      fn(p + "w1", lay.w1);
      fn(p + "b1", lay.b1);
      fn(p + "w2", lay.w2);
      fn(p + "b2", lay.b2);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("w_out", w_out);
  }
  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<Parameters*>(this)->for_each_tensor(
        [&](const std::string& name, Mat& m) { fn(name, const_cast<const Mat&>(m)); });
  }

  size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();
};

// Per-layer cached hidden states (layer inputs) of the most recent tokens.
// Gradients never flow into the cache; entries are treated as constants.
struct MemoryCache {
  std::vector<Mat> layer_input;

  bool empty() const { return layer_input.empty() || layer_input[0].rows() == 0; }
  int length() const { return layer_input.empty() ? 0 : static_cast<int>(layer_input[0].rows()); }
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 0;
  int total_steps = 0;
  int batch_size = 16;
  uint64_t seed = 1;
  int budget_text = 384;     // prior raw tokens fed at training time
  int budget_summary = 128;  // prior summary tokens fed at training time

  void validate() const;
};

// Linear warmup to the peak rate, then linear decay to zero.
double lr_at(const TrainConfig& cfg, int64_t step);

struct TrainBatch {
  int batch = 0;
  int length = 0;
  std::vector<TokenId> ids;      // batch*length, padded
  std::vector<TokenId> targets;  // batch*length; negative entries are not scored
};

struct AdamState {
  std::vector<Mat> m, v;
  int64_t step = 0;

  static AdamState zeros_for(Parameters& params);
};

// Mean NLL over scored positions of row-wise softmax(logits).
double nll_loss(const Mat& logits, std::span<const TokenId> targets,
                std::span<const uint8_t> scored);

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

  // Causal forward over one sequence; logits per position. The optional
  // memory supplies cached prior context; new_mem receives the rolled cache.
  Mat forward(std::span<const TokenId> ids, const MemoryCache& mem, MemoryCache* new_mem) const;
  Mat forward(std::span<const TokenId> ids) const;

  // Final-layernorm hidden states instead of logits (classifier trunk path).
  Mat forward_hidden(std::span<const TokenId> ids) const;

  // Sum of per-token conditional log-probs of target given conditioning,
  // processed in max_seq_len chunks with the recurrence cache.
  double sequence_log_prob(std::span<const TokenId> conditioning,
                           std::span<const TokenId> target) const;

  // Incremental decoding.
  struct StepState {
    MemoryCache mem;
    Vec log_probs;  // log-softmax over next token
    int consumed = 0;
  };
  StepState prime(std::span<const TokenId> prefix) const;
  void advance(StepState& state, TokenId token) const;

  // Batched training pass: mean NLL over scored positions plus parameter
  // gradients. mems, when given, supplies one equal-length cache per item
  // (segment-level recurrence training); new_mems receives rolled caches.
  double loss_and_gradients(const TrainBatch& batch, const std::vector<MemoryCache>* mems,
                            std::vector<MemoryCache>* new_mems, Parameters& grads,
                            Rng* dropout_rng) const;

  // Classifier-trunk training: gradients of mean NLL of binary labels read
  // from the final hidden state at each sequence's last real position.
  struct ClassifierBatch {
    int batch = 0;
    int length = 0;
    std::vector<TokenId> ids;
    std::vector<int> lengths;
    std::vector<int> labels;  // 0/1
  };
  double classifier_loss_and_gradients(const ClassifierBatch& batch, const Mat& head_w,
                                       const Mat& head_b, Parameters& grads, Mat& head_w_grad,
                                       Mat& head_b_grad, Rng* dropout_rng) const;

 private:
  ModelConfig cfg_;
  Parameters params_;
};

// One Adam update using lr_at(cfg, state.step + 1); increments state.step.
void adam_update(Parameters& params, const Parameters& grads, AdamState& state,
                 const TrainConfig& cfg);

// Forward/backward/update on one batch. Throws on non-finite loss.
double train_step(Model& model, AdamState& adam, const TrainBatch& batch, const TrainConfig& cfg,
                  Rng& dropout_rng);

// Binary head over the trunk's final hidden state.
struct BinaryClassifier {
  Model trunk;
  Mat head_w;  // d_model x 2
  Mat head_b;  // 1 x 2

  BinaryClassifier() = default;
  BinaryClassifier(const ModelConfig& cfg, uint64_t init_seed);

  // P(label == 1)
  double probability(std::span<const TokenId> ids) const;
};

// ---------------------------------------------------------------------------
// Input assembly for the two shared generation tasks.
// Layout: TASK ++ prior-text tail ++ <bos> ++ summary slot ++ <bos>.
// Truncation keeps the most recent tokens of each slot.
// ---------------------------------------------------------------------------

struct SegmentData {
  std::vector<TokenId> tokens;
  std::vector<TokenId> summary;
};

struct AssemblyOptions {
  int budget_text = 384;
  int budget_summary = 128;
  bool drop_prior_text = false;                  // summary task conditions on summaries only
  bool restrict_summaries_to_text_window = false;  // drop summaries of segments older than
                                                   // the prior-text window
};

struct InputAssembly {
  std::vector<TokenId> ids;
  int text_tokens = 0;
  int summary_tokens = 0;
  int text_segments = 0;     // history segments represented in the text slot
  int summary_segments = 0;  // history segments represented in the summary slot
};

InputAssembly make_summary_input(const std::vector<SegmentData>& history,
                                 const AssemblyOptions& opts);
InputAssembly make_expansion_input(const std::vector<SegmentData>& history,
                                   const std::vector<TokenId>& current_summary,
                                   const AssemblyOptions& opts);

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, little-endian u64 JSON header length, JSON
// header (model config, task, step, seed, hashes, tensor manifest), then raw
// little-endian float32 tensor data in manifest order.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::string task;
  int64_t step = 0;
  uint64_t seed = 0;
  std::string vocab_hash;
  std::string config_hash;
};

void save_checkpoint(const std::string& path, const Model& model, const AdamState* adam,
                     const BinaryClassifier* classifier, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model model;
  AdamState adam;
  bool has_adam = false;
  BinaryClassifier classifier;  // trunk shares the model weights
  bool has_classifier = false;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace soe
