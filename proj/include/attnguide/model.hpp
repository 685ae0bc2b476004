#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "attnguide/ops.hpp"
#include "attnguide/patterns.hpp"
#include "attnguide/random.hpp"
#include "attnguide/subtok.hpp"

namespace attnguide {

enum class Task { Cloze, Clone };

std::string_view to_string(Task t);
Task task_from_string(std::string_view s);

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t heads = 4;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  double mask_rate = 0.15;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Eigen::MatrixXd wq, wk, wv;  // d x d, head j owns columns [j*dk, (j+1)*dk)
  Eigen::MatrixXd wo, bo;      // d x d, 1 x d
  Eigen::MatrixXd ln1_gain, ln1_bias;
  Eigen::MatrixXd w1, b1;  // d x ffn, 1 x ffn
  Eigen::MatrixXd w2, b2;  // ffn x d, 1 x d
  Eigen::MatrixXd ln2_gain, ln2_bias;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (auto* m : {&self.wq, &self.wk, &self.wv, &self.wo, &self.bo, &self.ln1_gain,
                    &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_gain,
                    &self.ln2_bias})
      f(*m);
  }
};

struct Parameters {
  Eigen::MatrixXd embedding;  // vocab x d
  std::vector<LayerParams> layers;
  Eigen::MatrixXd mlm_weight, mlm_bias;  // d x vocab, 1 x vocab
  Eigen::MatrixXd cls_weight, cls_bias;  // d x 1, 1 x 1

  static Parameters initialize(const ModelConfig& config);
  static Parameters zeros_like(const Parameters& other);

  // Declaration order; this is the checkpoint order.
  template <typename F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t count() const;
  std::vector<Eigen::MatrixXd*> tensors();
  void set_zero();

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(self.embedding);
    for (auto& layer : self.layers) LayerParams::visit(layer, f);
    f(self.mlm_weight);
    f(self.mlm_bias);
    f(self.cls_weight);
    f(self.cls_bias);
  }
};

/// Linear decay alpha(t) = alpha0 * (1 - t) over training progress t in [0, 1].
struct AlphaSchedule {
  double alpha0 = 1.0;
  std::size_t total_steps = 0;
  std::size_t step = 0;

  double at(double progress) const { return alpha0 * (1.0 - progress); }
  double progress() const {
    return total_steps == 0 ? 0.0 : static_cast<double>(step) / static_cast<double>(total_steps);
  }
  double current() const { return at(progress()); }
};

struct GuidedModel {
  ModelConfig config;
  Parameters params;
  GuidingMap guiding;
  Task task = Task::Cloze;
  AlphaSchedule schedule;

  static GuidedModel create(const ModelConfig& config, Task task, GuidingMap guiding = {});
};

/// One model input: (masked) ids plus everything the losses need.
struct Example {
  std::vector<TokenId> ids;  // length n
  std::size_t real_len = 0;
  std::vector<std::size_t> target_positions;  // the MLM set C
  std::vector<TokenId> targets;
  int label = -1;                       // clone task: 0 or 1
  std::vector<PatternMatrix> patterns;  // indexed like GuidingMap::distinct_specs()
};

struct MaskResult {
  std::vector<TokenId> ids;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

/// Selects each maskable position with probability `rate` (at least one is
/// always selected); selections become [MASK] 80%, stay 10%, random 10%.
MaskResult apply_mlm_mask(const AlignedSequence& seq, double rate, Rng& rng,
                          std::size_t vocab_size);

namespace detail {
struct LayerCache {
  Eigen::MatrixXd input, q, k, v, z;
  std::vector<Eigen::MatrixXd> attention;  // m x m per head
  ops::LayerNormCache<double> ln1, ln2;
  Eigen::MatrixXd y, pre_act, act;
};
}  // namespace detail

class ForwardTrace {
 public:
  std::size_t seq_len() const { return n_; }
  std::size_t real_len() const { return m_; }
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t heads() const { return layers_.empty() ? 0 : layers_.front().attention.size(); }

  /// n x n attention of (layer, head); [PAD] rows and columns are zero.
  Eigen::MatrixXd attention(std::size_t layer, std::size_t head) const;
  /// The real_len x real_len block, without copying.
  const Eigen::MatrixXd& attention_real(std::size_t layer, std::size_t head) const {
    return layers_[layer].attention[head];
  }
  /// Hidden states, real_len x d: index 0 is the embedding layer.
  const std::vector<Eigen::MatrixXd>& hidden() const { return hidden_; }
  /// One row per target position, in Example::target_positions order.
  const Eigen::MatrixXd& mlm_logits() const { return mlm_logits_; }
  double clone_logit() const { return clone_logit_; }
  /// Sign pattern of every feed-forward pre-activation (true = active).
  std::vector<bool> relu_pattern() const;

 private:
  friend ForwardTrace forward(const GuidedModel&, const Example&);
  friend struct Backprop;
  std::size_t n_ = 0, m_ = 0;
  std::vector<detail::LayerCache> layers_;
  std::vector<Eigen::MatrixXd> hidden_;
  Eigen::MatrixXd mlm_logits_;
  double clone_logit_ = 0.0;
};

ForwardTrace forward(const GuidedModel& model, const Example& example);

/// Mean over C of -log P(target | input).
double mlm_loss(const ForwardTrace& trace, const std::vector<TokenId>& targets);
/// Binary cross-entropy of sigmoid(clone logit) against label.
double clone_loss(const ForwardTrace& trace, int label);

class DimMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Frobenius norm of H - P over included rows and non-[PAD] columns.
template <typename Derived>
double ag_loss(const Eigen::MatrixBase<Derived>& attention, const PatternMatrix& pattern) {
  const auto rows = attention.rows();
  if (rows != attention.cols() || rows > pattern.values.rows())
    throw DimMismatch("attention is " + std::to_string(attention.rows()) + "x" +
                      std::to_string(attention.cols()) + ", pattern is " +
                      std::to_string(pattern.values.rows()));
  // A real_len-sized block is accepted against a padded pattern.
  if (rows != pattern.values.rows() && static_cast<std::size_t>(rows) != pattern.real_len)
    throw DimMismatch("attention block does not match the pattern's real length");
  const auto cols = std::min<Eigen::Index>(rows, static_cast<Eigen::Index>(pattern.real_len));
  double sq = 0.0;
  for (Eigen::Index p = 0; p < rows; ++p) {
    if (!pattern.row_included[static_cast<std::size_t>(p)]) continue;
    sq += (attention.row(p).head(cols) - pattern.values.row(p).head(cols)).squaredNorm();
  }
  return std::sqrt(sq);
}

/// Patterns of `example` assigned to each head index (nullptr if unguided),
/// taken from layer 0 of the map; the assignment is layer-invariant.
std::vector<const PatternMatrix*> head_patterns(const GuidingMap& map, const Example& example);

/// Sum of ag_loss over guided (layer, head) pairs.
double sag_loss(const ForwardTrace& trace, const GuidingMap& map, const Example& example);

struct LossBreakdown {
  double task = 0.0;
  double sag = 0.0;
  double alpha = 0.0;
  double total = 0.0;
};

/// Batch mean of L_task + alpha(t) * L_SAG. When `grad` is non-null it is
/// overwritten with the gradient of the returned total.
LossBreakdown total_loss(const GuidedModel& model, const std::vector<Example>& batch,
                         double progress, Parameters* grad = nullptr);

/// Item from which training examples are drawn; cloze items are re-masked
/// every time they are visited.
struct TrainItem {
  AlignedSequence seq;
  std::vector<PatternMatrix> patterns;
  int label = -1;
};

Example make_example(const TrainItem& item, Task task, double mask_rate, Rng& mask_rng,
                     std::size_t vocab_size);

struct TrainOptions {
  double lr = 3e-4;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;  // batch order and mask draws
};

struct TrainLogEntry {
  std::size_t step = 0;
  double task_loss = 0.0;
  double sag_loss = 0.0;
  double alpha = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  void write_csv(std::ostream& out) const;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::size_t step, double value);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Mini-batch Adam on total_loss; sequential and deterministic under seed.
TrainLog train(GuidedModel& model, const std::vector<TrainItem>& data, const TrainOptions& options);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbation flipped a ReLU
};

/// Central differences on `samples` randomly chosen parameters against the
/// analytic gradient of total_loss at `progress`.
GradientCheckResult gradient_check(GuidedModel& model, const std::vector<Example>& batch,
                                   double epsilon, std::size_t samples = 200,
                                   std::uint64_t seed = 7, double progress = 0.0);

// Checkpoint: "SGLM", u32 version, config block, then every parameter tensor
// row-major as little-endian f64 in declaration order.
void save_checkpoint(std::ostream& out, const GuidedModel& model);
void save_checkpoint_file(const std::string& path, const GuidedModel& model);
/// Restores config and parameters; guiding and task are not part of the file.
GuidedModel load_checkpoint(std::istream& in);
GuidedModel load_checkpoint_file(const std::string& path);

/// Index of the largest logit (lowest id on ties).
TokenId argmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits);

}  // namespace attnguide
