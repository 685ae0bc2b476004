#include "attnguide/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>

namespace attnguide {

using Eigen::Index;
using Eigen::MatrixXd;

std::string_view to_string(Task t) { return t == Task::Cloze ? "cloze" : "clone"; }

Task task_from_string(std::string_view s) {
  if (s == "cloze") return Task::Cloze;
  if (s == "clone") return Task::Clone;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected cloze|clone)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (num_layers == 0) fail("num_layers must be positive");
  if (heads == 0) fail("heads must be positive");
  if (model_dim == 0 || model_dim % heads != 0) fail("model_dim must be divisible by heads");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (vocab_size <= Vocab::kNumSpecials) fail("vocab_size must exceed the special tokens");
  if (max_len < 3) fail("max_len must be at least 3");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) fail("mask_rate must lie in (0, 1)");
}

namespace {

MatrixXd gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  MatrixXd m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = stddev * standard_normal(rng);
  return m;
}

const MatrixXd& positional_table(std::size_t n, std::size_t d) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, MatrixXd> cache;
  std::lock_guard lock(mu);
  auto [it, inserted] = cache.try_emplace({n, d});
  if (inserted) {
    it->second.resize(static_cast<Index>(n), static_cast<Index>(d));
    for (std::size_t p = 0; p < n; ++p)
      it->second.row(static_cast<Index>(p)) = ops::positional_encoding(p, d).transpose();
  }
  return it->second;
}

}  // namespace

Parameters Parameters::initialize(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0));
  const auto d = static_cast<Index>(config.model_dim);
  const auto f = static_cast<Index>(config.ffn_dim);
  const auto v = static_cast<Index>(config.vocab_size);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  Parameters p;
  p.embedding = gaussian(v, d, 1.0, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams layer;
    layer.wq = gaussian(d, d, sd, rng);
    layer.wk = gaussian(d, d, sd, rng);
    layer.wv = gaussian(d, d, sd, rng);
    layer.wo = gaussian(d, d, sd, rng);
    layer.bo = MatrixXd::Zero(1, d);
    layer.ln1_gain = MatrixXd::Ones(1, d);
    layer.ln1_bias = MatrixXd::Zero(1, d);
    layer.w1 = gaussian(d, f, sd, rng);
    layer.b1 = MatrixXd::Zero(1, f);
    layer.w2 = gaussian(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng);
    layer.b2 = MatrixXd::Zero(1, d);
    layer.ln2_gain = MatrixXd::Ones(1, d);
    layer.ln2_bias = MatrixXd::Zero(1, d);
    p.layers.push_back(std::move(layer));
  }
  p.mlm_weight = gaussian(d, v, sd, rng);
  p.mlm_bias = MatrixXd::Zero(1, v);
  p.cls_weight = gaussian(d, 1, sd, rng);
  p.cls_bias = MatrixXd::Zero(1, 1);
  return p;
}

Parameters Parameters::zeros_like(const Parameters& other) {
  Parameters p = other;
  p.set_zero();
  return p;
}

void Parameters::set_zero() {
  for_each([](MatrixXd& m) { m.setZero(); });
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for_each([&](const MatrixXd& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::vector<MatrixXd*> Parameters::tensors() {
  std::vector<MatrixXd*> out;
  for_each([&](MatrixXd& m) { out.push_back(&m); });
  return out;
}

GuidedModel GuidedModel::create(const ModelConfig& config, Task task, GuidingMap guiding) {
  GuidedModel m;
  m.config = config;
  m.params = Parameters::initialize(config);
  m.task = task;
  m.guiding = guiding.num_layers() == 0 ? GuidingMap(config.num_layers, config.heads)
                                        : std::move(guiding);
  if (m.guiding.num_layers() != config.num_layers || m.guiding.heads_per_layer() != config.heads)
    throw std::invalid_argument("guiding map shape does not match the model");
  return m;
}

MaskResult apply_mlm_mask(const AlignedSequence& seq, double rate, Rng& rng,
                          std::size_t vocab_size) {
  MaskResult out;
  out.ids = seq.ids;
  std::vector<std::size_t> eligible;
  for (std::size_t p = 0; p < seq.real_len; ++p)
    if (seq.alignment[p]) eligible.push_back(p);
  if (eligible.empty()) throw std::invalid_argument("sequence has no maskable position");

  for (std::size_t p : eligible)
    if (uniform01(rng) < rate) out.positions.push_back(p);
  if (out.positions.empty()) out.positions.push_back(eligible[uniform_index(rng, eligible.size())]);

  const std::size_t random_pool =
      vocab_size > Vocab::kNumSpecials ? vocab_size - Vocab::kNumSpecials : 0;
  for (std::size_t p : out.positions) {
    out.targets.push_back(seq.ids[p]);
    const double r = uniform01(rng);
    if (r < 0.8) {
      out.ids[p] = Vocab::kMask;
    } else if (r >= 0.9) {
      out.ids[p] = random_pool
                       ? static_cast<TokenId>(Vocab::kNumSpecials + uniform_index(rng, random_pool))
                       : Vocab::kUnk;
    }
  }
  return out;
}

std::vector<bool> ForwardTrace::relu_pattern() const {
  std::vector<bool> out;
  for (const auto& c : layers_)
    for (Index k = 0; k < c.pre_act.size(); ++k) out.push_back(c.pre_act.data()[k] > 0.0);
  return out;
}

Eigen::MatrixXd ForwardTrace::attention(std::size_t layer, std::size_t head) const {
  MatrixXd full = MatrixXd::Zero(static_cast<Index>(n_), static_cast<Index>(n_));
  const auto m = static_cast<Index>(m_);
  full.topLeftCorner(m, m) = layers_.at(layer).attention.at(head);
  return full;
}

ForwardTrace forward(const GuidedModel& model, const Example& ex) {
  const auto& cfg = model.config;
  const auto& prm = model.params;
  const auto m = static_cast<Index>(ex.real_len);
  const auto d = static_cast<Index>(cfg.model_dim);
  const auto dk = static_cast<Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  if (ex.ids.size() > cfg.max_len) throw std::invalid_argument("input longer than max_len");
  if (ex.real_len == 0 || ex.real_len > ex.ids.size())
    throw std::invalid_argument("real_len out of range");

  ForwardTrace tr;
  tr.n_ = ex.ids.size();
  tr.m_ = ex.real_len;

  const MatrixXd& pe = positional_table(cfg.max_len, cfg.model_dim);
  MatrixXd x(m, d);
  for (Index p = 0; p < m; ++p) {
    const TokenId id = ex.ids[static_cast<std::size_t>(p)];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw std::out_of_range("token id outside vocabulary");
    x.row(p) = prm.embedding.row(id) + pe.row(p);
  }
  tr.hidden_.push_back(x);

  tr.layers_.reserve(cfg.num_layers);
  for (const auto& L : prm.layers) {
    detail::LayerCache c;
    c.input = x;
    c.q.noalias() = x * L.wq;
    c.k.noalias() = x * L.wk;
    c.v.noalias() = x * L.wv;
    c.z.resize(m, d);
    c.attention.reserve(cfg.heads);
    for (std::size_t j = 0; j < cfg.heads; ++j) {
      const Index off = static_cast<Index>(j) * dk;
      const MatrixXd scores =
          (c.q.middleCols(off, dk) * c.k.middleCols(off, dk).transpose()) * scale;
      c.attention.push_back(ops::masked_softmax_rows(scores, m));
      c.z.middleCols(off, dk).noalias() = c.attention.back() * c.v.middleCols(off, dk);
    }
    MatrixXd residual = x + c.z * L.wo;
    residual.rowwise() += L.bo.row(0);
    c.y = ops::layer_norm(residual, L.ln1_gain, L.ln1_bias, c.ln1);
    c.pre_act.noalias() = c.y * L.w1;
    c.pre_act.rowwise() += L.b1.row(0);
    c.act = c.pre_act.cwiseMax(0.0);
    MatrixXd residual2 = c.y + c.act * L.w2;
    residual2.rowwise() += L.b2.row(0);
    x = ops::layer_norm(residual2, L.ln2_gain, L.ln2_bias, c.ln2);
    tr.layers_.push_back(std::move(c));
    tr.hidden_.push_back(x);
  }

  tr.mlm_logits_.resize(static_cast<Index>(ex.target_positions.size()), prm.mlm_weight.cols());
  for (std::size_t i = 0; i < ex.target_positions.size(); ++i) {
    const auto p = static_cast<Index>(ex.target_positions[i]);
    if (p >= m) throw std::out_of_range("target position beyond real length");
    tr.mlm_logits_.row(static_cast<Index>(i)) = x.row(p) * prm.mlm_weight + prm.mlm_bias;
  }
  tr.clone_logit_ = x.row(0).dot(prm.cls_weight.col(0)) + prm.cls_bias(0, 0);
  return tr;
}

namespace {

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double mx = v.maxCoeff();
  return mx + std::log((v.array() - mx).exp().sum());
}

double softplus(double s) { return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

}  // namespace

double mlm_loss(const ForwardTrace& trace, const std::vector<TokenId>& targets) {
  const auto& logits = trace.mlm_logits();
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw std::invalid_argument("target count does not match the masked positions");
  if (targets.empty()) return 0.0;
  double sum = 0.0;
  for (Index i = 0; i < logits.rows(); ++i)
    sum += log_sum_exp(logits.row(i)) - logits(i, targets[static_cast<std::size_t>(i)]);
  return sum / static_cast<double>(targets.size());
}

double clone_loss(const ForwardTrace& trace, int label) {
  if (label != 0 && label != 1) throw std::invalid_argument("clone label must be 0 or 1");
  const double s = trace.clone_logit();
  return softplus(s) - static_cast<double>(label) * s;
}

std::vector<const PatternMatrix*> head_patterns(const GuidingMap& map, const Example& example) {
  std::vector<const PatternMatrix*> out(map.heads_per_layer(), nullptr);
  if (map.num_layers() == 0) return out;
  const auto specs = map.distinct_specs();
  if (example.patterns.size() < specs.size())
    throw std::invalid_argument("example lacks patterns for the guiding map");
  for (std::size_t j = 0; j < map.heads_per_layer(); ++j) {
    const auto& spec = map.at(0, j);
    if (!spec) continue;
    const auto idx = static_cast<std::size_t>(
        std::find(specs.begin(), specs.end(), *spec) - specs.begin());
    if (!(example.patterns[idx].spec == *spec))
      throw std::invalid_argument("example patterns are out of order with the guiding map");
    out[j] = &example.patterns[idx];
  }
  return out;
}

double sag_loss(const ForwardTrace& trace, const GuidingMap& map, const Example& example) {
  double sum = 0.0;
  if (!map.any_guided()) return 0.0;
  const auto specs = map.distinct_specs();
  for (std::size_t l = 0; l < map.num_layers(); ++l) {
    for (std::size_t j = 0; j < map.heads_per_layer(); ++j) {
      const auto& spec = map.at(l, j);
      if (!spec) continue;
      const auto idx = static_cast<std::size_t>(
          std::find(specs.begin(), specs.end(), *spec) - specs.begin());
      sum += ag_loss(trace.attention_real(l, j), example.patterns.at(idx));
    }
  }
  return sum;
}

struct Backprop {
  // Accumulates d(task_scale * L_task + sag_scale * L_SAG)/dθ into grad.
  static void run(const GuidedModel& model, const Example& ex, const ForwardTrace& tr,
                  double task_scale, double sag_scale, Parameters& grad) {
    const auto& cfg = model.config;
    const auto& prm = model.params;
    const auto m = static_cast<Index>(tr.m_);
    const auto d = static_cast<Index>(cfg.model_dim);
    const auto dk = static_cast<Index>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const MatrixXd& top = tr.hidden_.back();

    MatrixXd dx = MatrixXd::Zero(m, d);
    if (model.task == Task::Cloze && task_scale != 0.0 && !ex.target_positions.empty()) {
      const double w = task_scale / static_cast<double>(ex.target_positions.size());
      for (std::size_t i = 0; i < ex.target_positions.size(); ++i) {
        const auto p = static_cast<Index>(ex.target_positions[i]);
        const auto logits = tr.mlm_logits_.row(static_cast<Index>(i));
        Eigen::RowVectorXd dlogits = (logits.array() - logits.maxCoeff()).exp();
        dlogits /= dlogits.sum();
        dlogits[ex.targets[i]] -= 1.0;
        dlogits *= w;
        grad.mlm_weight.noalias() += top.row(p).transpose() * dlogits;
        grad.mlm_bias += dlogits;
        dx.row(p).noalias() += dlogits * prm.mlm_weight.transpose();
      }
    } else if (model.task == Task::Clone && task_scale != 0.0) {
      const double ds = (sigmoid(tr.clone_logit_) - static_cast<double>(ex.label)) * task_scale;
      grad.cls_weight += top.row(0).transpose() * ds;
      grad.cls_bias(0, 0) += ds;
      dx.row(0) += ds * prm.cls_weight.col(0).transpose();
    }

    std::vector<const PatternMatrix*> guided(cfg.heads, nullptr);
    if (sag_scale != 0.0) guided = head_patterns(model.guiding, ex);

    for (std::size_t li = cfg.num_layers; li-- > 0;) {
      const auto& L = prm.layers[li];
      auto& G = grad.layers[li];
      const auto& c = tr.layers_[li];

      const MatrixXd dr2 =
          ops::layer_norm_backward(dx, L.ln2_gain, c.ln2, G.ln2_gain, G.ln2_bias);
      G.w2.noalias() += c.act.transpose() * dr2;
      G.b2 += dr2.colwise().sum();
      MatrixXd dpre = dr2 * L.w2.transpose();
      dpre.array() *= (c.pre_act.array() > 0.0).cast<double>();
      G.w1.noalias() += c.y.transpose() * dpre;
      G.b1 += dpre.colwise().sum();
      MatrixXd dy = dr2;
      dy.noalias() += dpre * L.w1.transpose();

      const MatrixXd dr1 = ops::layer_norm_backward(dy, L.ln1_gain, c.ln1, G.ln1_gain, G.ln1_bias);
      G.wo.noalias() += c.z.transpose() * dr1;
      G.bo += dr1.colwise().sum();
      const MatrixXd dz = dr1 * L.wo.transpose();

      MatrixXd dq(m, d), dkm(m, d), dv(m, d);
      for (std::size_t j = 0; j < cfg.heads; ++j) {
        const Index off = static_cast<Index>(j) * dk;
        const MatrixXd& A = c.attention[j];
        MatrixXd dA = dz.middleCols(off, dk) * c.v.middleCols(off, dk).transpose();
        if (const auto* pat = guided[j]; pat && model.guiding.at(li, j)) {
          const double loss = ag_loss(A, *pat);
          if (loss > 0.0) {
            const double w = sag_scale / loss;
            for (Index p = 0; p < m; ++p)
              if (pat->row_included[static_cast<std::size_t>(p)])
                dA.row(p) += w * (A.row(p) - pat->values.row(p).head(m));
          }
        }
        dv.middleCols(off, dk).noalias() = A.transpose() * dz.middleCols(off, dk);
        const MatrixXd dS = ops::softmax_rows_backward(A, dA) * scale;
        dq.middleCols(off, dk).noalias() = dS * c.k.middleCols(off, dk);
        dkm.middleCols(off, dk).noalias() = dS.transpose() * c.q.middleCols(off, dk);
      }
      G.wq.noalias() += c.input.transpose() * dq;
      G.wk.noalias() += c.input.transpose() * dkm;
      G.wv.noalias() += c.input.transpose() * dv;
      dx = dr1;
      dx.noalias() += dq * L.wq.transpose();
      dx.noalias() += dkm * L.wk.transpose();
      dx.noalias() += dv * L.wv.transpose();
    }

    for (Index p = 0; p < m; ++p) grad.embedding.row(ex.ids[static_cast<std::size_t>(p)]) += dx.row(p);
  }
};

LossBreakdown total_loss(const GuidedModel& model, const std::vector<Example>& batch,
                         double progress, Parameters* grad) {
  LossBreakdown out;
  out.alpha = model.schedule.at(progress);
  if (grad) {
    if (grad->layers.size() != model.params.layers.size())
      *grad = Parameters::zeros_like(model.params);
    else
      grad->set_zero();
  }
  if (batch.empty()) return out;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double task_sum = 0.0, sag_sum = 0.0, total_sum = 0.0;
  for (const auto& ex : batch) {
    const ForwardTrace tr = forward(model, ex);
    const double task =
        model.task == Task::Cloze ? mlm_loss(tr, ex.targets) : clone_loss(tr, ex.label);
    const double sag = sag_loss(tr, model.guiding, ex);
    task_sum += task;
    sag_sum += sag;
    total_sum += task + out.alpha * sag;
    if (grad) Backprop::run(model, ex, tr, inv_b, out.alpha * inv_b, *grad);
  }
  out.task = task_sum * inv_b;
  out.sag = sag_sum * inv_b;
  out.total = total_sum * inv_b;
  return out;
}

Example make_example(const TrainItem& item, Task task, double mask_rate, Rng& mask_rng,
                     std::size_t vocab_size) {
  Example ex;
  ex.real_len = item.seq.real_len;
  ex.patterns = item.patterns;
  ex.label = item.label;
  if (task == Task::Cloze) {
    auto masked = apply_mlm_mask(item.seq, mask_rate, mask_rng, vocab_size);
    ex.ids = std::move(masked.ids);
    ex.target_positions = std::move(masked.positions);
    ex.targets = std::move(masked.targets);
  } else {
    ex.ids = item.seq.ids;
  }
  return ex;
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "step,L_task,L_SAG,alpha\n";
  char buf[128];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", e.step, e.task_loss, e.sag_loss,
                  e.alpha);
    out << buf;
  }
}

NonFiniteLoss::NonFiniteLoss(std::size_t step, double value)
    : std::runtime_error("non-finite loss " + std::to_string(value) + " at step " +
                         std::to_string(step)),
      step_(step) {}

TrainLog train(GuidedModel& model, const std::vector<TrainItem>& data, const TrainOptions& options) {
  if (data.empty()) throw std::invalid_argument("training set is empty");
  if (options.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  const std::size_t per_epoch = (data.size() + options.batch_size - 1) / options.batch_size;
  model.schedule.total_steps = per_epoch * options.epochs;
  model.schedule.step = 0;

  Rng order_rng(derive_seed(options.seed, 1));
  Rng mask_rng(derive_seed(options.seed, 2));
  Parameters grad = Parameters::zeros_like(model.params);
  Parameters m1 = grad, m2 = grad;
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  TrainLog log;
  log.entries.reserve(model.schedule.total_steps);
  std::vector<std::size_t> order(data.size());
  std::vector<Example> batch;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      batch.clear();
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      for (std::size_t i = start; i < end; ++i)
        batch.push_back(make_example(data[order[i]], model.task, model.config.mask_rate, mask_rng,
                                     model.config.vocab_size));

      const std::size_t step = model.schedule.step;
      const LossBreakdown loss = total_loss(model, batch, model.schedule.progress(), &grad);
      if (!std::isfinite(loss.total)) throw NonFiniteLoss(step, loss.total);
      log.entries.push_back({step, loss.task, loss.sag, loss.alpha});

      const double t = static_cast<double>(step + 1);
      const double c1 = 1.0 - std::pow(beta1, t);
      const double c2 = 1.0 - std::pow(beta2, t);
      auto params = model.params.tensors();
      auto grads = grad.tensors();
      auto firsts = m1.tensors();
      auto seconds = m2.tensors();
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto g = grads[k]->array();
        auto a = firsts[k]->array();
        auto b = seconds[k]->array();
        a = beta1 * a + (1.0 - beta1) * g;
        b = beta2 * b + (1.0 - beta2) * g.square();
        params[k]->array() -= options.lr * (a / c1) / ((b / c2).sqrt() + adam_eps);
      }
      ++model.schedule.step;
    }
  }
  return log;
}

namespace {

std::vector<bool> relu_signature(const GuidedModel& model, const std::vector<Example>& batch) {
  std::vector<bool> sig;
  for (const auto& ex : batch) {
    const auto s = forward(model, ex).relu_pattern();
    sig.insert(sig.end(), s.begin(), s.end());
  }
  return sig;
}

}  // namespace

GradientCheckResult gradient_check(GuidedModel& model, const std::vector<Example>& batch,
                                   double epsilon, std::size_t samples, std::uint64_t seed,
                                   double progress) {
  GradientCheckResult res;
  Parameters grad;
  total_loss(model, batch, progress, &grad);
  auto params = model.params.tensors();
  auto grads = grad.tensors();
  const auto base = relu_signature(model, batch);
  Rng rng(seed);
  std::size_t attempts = 0;
  while (res.checked < samples && attempts < samples * 50) {
    ++attempts;
    const std::size_t ti = uniform_index(rng, params.size());
    const auto entry = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(params[ti]->size())));
    double& w = params[ti]->data()[entry];
    const double orig = w;
    w = orig + epsilon;
    const double plus = total_loss(model, batch, progress).total;
    const bool kink_plus = relu_signature(model, batch) != base;
    w = orig - epsilon;
    const double minus = total_loss(model, batch, progress).total;
    const bool kink_minus = relu_signature(model, batch) != base;
    w = orig;
    if (kink_plus || kink_minus) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * epsilon);
    const double analytic = grads[ti]->data()[entry];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
    res.max_relative_error = std::max(res.max_relative_error, std::abs(numeric - analytic) / denom);
    ++res.checked;
  }
  return res;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_u(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u(in, 8)); }

constexpr char kMagic[4] = {'S', 'G', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(std::ostream& out, const GuidedModel& model) {
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  const auto& c = model.config;
  for (std::size_t v : {c.num_layers, c.heads, c.model_dim, c.ffn_dim, c.vocab_size, c.max_len})
    put_u32(out, static_cast<std::uint32_t>(v));
  put_f64(out, c.mask_rate);
  put_u64(out, c.seed);
  model.params.for_each([&](const MatrixXd& m) {
    for (Index r = 0; r < m.rows(); ++r)
      for (Index k = 0; k < m.cols(); ++k) put_f64(out, m(r, k));
  });
  if (!out) throw std::runtime_error("checkpoint write failed");
}

void save_checkpoint_file(const std::string& path, const GuidedModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_checkpoint(out, model);
}

GuidedModel load_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not an SGLM checkpoint");
  const auto version = get_u(in, 4);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.num_layers = get_u(in, 4);
  c.heads = get_u(in, 4);
  c.model_dim = get_u(in, 4);
  c.ffn_dim = get_u(in, 4);
  c.vocab_size = get_u(in, 4);
  c.max_len = get_u(in, 4);
  c.mask_rate = get_f64(in);
  c.seed = get_u(in, 8);
  GuidedModel model = GuidedModel::create(c, Task::Cloze);
  model.params.for_each([&](MatrixXd& m) {
    for (Index r = 0; r < m.rows(); ++r)
      for (Index k = 0; k < m.cols(); ++k) m(r, k) = get_f64(in);
  });
  return model;
}

GuidedModel load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_checkpoint(in);
}

TokenId argmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
  Index best = 0;
  for (Index i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

}  // namespace attnguide
