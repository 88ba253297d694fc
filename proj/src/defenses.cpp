#include "ecgrobust/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ecgrobust/errors.hpp"
#include "ecgrobust/eval.hpp"
#include "ecgrobust/rng.hpp"

namespace ecgrobust {

std::string method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::kCe: return "ce";
    case TrainMethod::kAdv: return "adv";
    case TrainMethod::kJacob: return "jacob";
    case TrainMethod::kNsr: return "nsr";
  }
  throw ParameterError("method_name: bad method");
}

TrainMethod method_from_name(const std::string& name) {
  if (name == "ce") return TrainMethod::kCe;
  if (name == "adv") return TrainMethod::kAdv;
  if (name == "jacob") return TrainMethod::kJacob;
  if (name == "nsr") return TrainMethod::kNsr;
  throw ParameterError("unknown training method '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("train: epochs must be >= 1");
  if (warmup_epochs < 0) throw ParameterError("train: warmup_epochs must be >= 0");
  if (epochs <= warmup_epochs) throw ParameterError("train: epochs must exceed warmup_epochs");
  if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
  if (epsilon < 0 || lambda < 0 || beta < 0 || eps_max < 0) {
    throw ParameterError("train: coefficients must be >= 0");
  }
  if (!(lr > 0)) throw ParameterError("train: lr must be positive");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1) {
    throw ParameterError("train: adam betas must lie in [0,1)");
  }
  if (!(adam_eps > 0)) throw ParameterError("train: adam_eps must be positive");
}

double ramp_epsilon(int t, int t_max, double epsilon, int warmup) {
  if (t < 1) throw ParameterError("ramp_epsilon: t must be >= 1");
  if (t_max <= warmup) throw ParameterError("ramp_epsilon: t_max must exceed the warmup epoch");
  if (epsilon < 0) throw ParameterError("ramp_epsilon: epsilon must be >= 0");
  const double v =
      epsilon * static_cast<double>(t - warmup) / static_cast<double>(t_max - warmup);
  return std::clamp(v, 0.0, epsilon);
}

NodePtr loss_ce(const NodePtr& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

NodePtr loss_adv(const EcgNet& net, const MaskedBatch& batch, const TrainConfig& cfg, int epoch,
                 std::uint64_t attack_seed) {
  NodePtr clean = loss_ce(net.forward(batch), batch.labels);
  if (epoch <= cfg.warmup_epochs) return clean;
  const double eps_t = ramp_epsilon(epoch, cfg.epochs, cfg.epsilon, cfg.warmup_epochs);
  if (eps_t == 0.0) return clean;  // both terms coincide exactly

  AttackConfig acfg;
  acfg.epsilon = eps_t;
  acfg.steps = kAdvTrainSteps;
  acfg.seed = attack_seed;
  Tensor adv_signals = pgd_attack(net, batch, acfg);
  MaskedBatch adv_batch{std::move(adv_signals), batch.mask, batch.labels};
  NodePtr adv = loss_ce(net.forward(adv_batch), batch.labels);
  return add(mul_scalar(clean, 0.5), mul_scalar(adv, 0.5));
}

NodePtr jacobian_penalty(const NodePtr& logits, const NodePtr& x, double lambda) {
  const Tensor& zv = logits->value();
  if (zv.rank() != 2) throw ParameterError("jacobian_penalty: rank-2 logits required");
  const std::int64_t n = zv.dim(0);
  const std::int64_t k = zv.dim(1);
  NodePtr total_sq;
  std::vector<int> col(static_cast<std::size_t>(n));
  for (std::int64_t cls = 0; cls < k; ++cls) {
    std::fill(col.begin(), col.end(), static_cast<int>(cls));
    NodePtr sk = sum(select_labels(logits, col));
    NodePtr gk = grad(sk, std::span<const NodePtr>(&x, 1), /*create_graph=*/true)[0];
    NodePtr sq = sum(square(gk));
    total_sq = total_sq ? add(total_sq, sq) : sq;
  }
  return mul_scalar(sqrt(total_sq), lambda / static_cast<double>(n * k));
}

NodePtr loss_jacobian(const EcgNet& net, const MaskedBatch& batch, const TrainConfig& cfg,
                      int epoch) {
  NodePtr x = variable(batch.signals);
  NodePtr logits = net.forward(x, constant(batch.mask));
  NodePtr ce = loss_ce(logits, batch.labels);
  if (epoch <= cfg.warmup_epochs || cfg.lambda == 0.0) return ce;
  return add(ce, jacobian_penalty(logits, x, cfg.lambda));
}

NsrTerms nsr_terms_from(const NodePtr& logits, const NodePtr& x, std::span<const int> labels,
                        double eps_max) {
  if (eps_max < 0) throw ParameterError("nsr_bound: eps_max must be >= 0");
  const std::int64_t n = logits->value().dim(0);
  NodePtr zy = select_labels(logits, labels);
  NodePtr w = grad(sum(zy), std::span<const NodePtr>(&x, 1), /*create_graph=*/true)[0];
  const std::int64_t d = w->value().numel() / n;

  NsrTerms terms;
  terms.logits = logits;
  terms.w1 = sum_last(abs(reshape(w, {n, d})));
  terms.zy_abs = abs(zy);
  NodePtr clamped = maximum(terms.zy_abs, constant(Tensor::full({n}, kNsrZClamp)));
  terms.r2 = div(mul_scalar(terms.w1, eps_max), clamped);

  const std::vector<int> preds = argmax_rows(logits->value());
  terms.correct.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    terms.correct[static_cast<std::size_t>(i)] =
        preds[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
  }
  return terms;
}

NsrTerms nsr_bound(const EcgNet& net, const MaskedBatch& batch, double eps_max) {
  NodePtr x = variable(batch.signals);
  NodePtr logits = net.forward(x, constant(batch.mask));
  return nsr_terms_from(logits, x, batch.labels, eps_max);
}

NodePtr loss_nsr(const NodePtr& logits, const NsrTerms& nsr, std::span<const int> labels,
                 double beta, int epoch, int warmup) {
  const Tensor& zv = logits->value();
  if (zv.rank() != 2) throw ParameterError("loss_nsr: rank-2 logits required");
  const std::int64_t n = zv.dim(0), k = zv.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n ||
      static_cast<std::int64_t>(nsr.correct.size()) != n) {
    throw ParameterError("loss_nsr: label count does not match logits");
  }

  Tensor onehot({n, k});
  for (std::int64_t i = 0; i < n; ++i) onehot.ptr()[i * k + labels[i]] = 1.0;
  NodePtr mse = sum_last(square(sub(logits, constant(onehot))));  // [n]

  const bool active = epoch > warmup;
  Tensor gate({n});
  for (std::int64_t i = 0; i < n; ++i) {
    gate.ptr()[i] = (active && nsr.correct[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
  }

  // margin over the wrong classes; the own-class term is a constant 1
  NodePtr zy_b = repeat_last(select_labels(logits, labels), k);
  Tensor not_y({n, k});
  for (std::int64_t e = 0; e < n * k; ++e) not_y.ptr()[e] = 1.0 - onehot.ptr()[e];
  NodePtr hinge = relu(add_scalar(sub(logits, zy_b), 1.0));
  NodePtr margin = sum_last(mul(hinge, constant(std::move(not_y))));  // [n]

  NodePtr reg = mul_scalar(log(add_scalar(nsr.r2, 1.0)), beta);  // [n]
  NodePtr gated = mul(constant(std::move(gate)), add(margin, reg));
  return mean(add(mse, gated));
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(EcgNet& net) {
  const std::size_t np = net.parameter_count();
  if (m_.empty()) {
    for (std::size_t i = 0; i < np; ++i) {
      m_.emplace_back(net.parameter_value(i).shape());
      v_.emplace_back(net.parameter_value(i).shape());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < np; ++i) {
    const NamedParam& p = net.parameters()[i];
    const Tensor& val = p.node->value();
    Tensor next = val;
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    double* out = next.ptr();
    const double* g = p.node->grad() ? p.node->grad()->value().ptr() : nullptr;
    for (std::int64_t e = 0; e < val.numel(); ++e) {
      const double ge = g ? g[e] : 0.0;
      m[e] = beta1_ * m[e] + (1.0 - beta1_) * ge;
      v[e] = beta2_ * v[e] + (1.0 - beta2_) * ge * ge;
      out[e] -= lr_ * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + eps_);
    }
    net.assign_parameter(i, std::move(next));
  }
}

namespace {

// warmup path for NSR: the gate is zero, so skip the input-gradient pass
NsrTerms nsr_terms_warmup(const EcgNet& net, const MaskedBatch& batch) {
  NsrTerms terms;
  terms.logits = net.forward(batch);
  const std::int64_t n = batch.size();
  terms.w1 = constant(Tensor({n}));
  terms.zy_abs = constant(Tensor({n}));
  terms.r2 = constant(Tensor({n}));
  terms.correct.assign(static_cast<std::size_t>(n), false);
  return terms;
}

std::vector<MaskedBatch> fixed_batches(const std::vector<PreparedRecord>& records,
                                       std::int64_t target_len, std::uint64_t seed,
                                       int batch_size) {
  std::vector<MaskedBatch> out;
  for (std::size_t start = 0; start < records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const PreparedRecord*> ptrs;
    std::vector<std::int64_t> offsets;
    for (std::size_t i = start; i < stop; ++i) {
      ptrs.push_back(&records[i]);
      offsets.push_back(fixed_offset(records[i], target_len, seed));
    }
    out.push_back(make_batch(ptrs, target_len, offsets));
  }
  return out;
}

}  // namespace

TrainResult train(EcgNet& net, const DatasetSplit& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw DataError("train: empty training split");
  if (data.val.empty()) throw DataError("train: empty validation split");

  const EcgNetConfig& mc = net.config();
  const std::int64_t target_len = mc.input_length;
  const int n_classes = static_cast<int>(mc.num_classes);

  const auto val_batches = fixed_batches(data.val, target_len, cfg.seed, cfg.batch_size);
  std::vector<int> val_labels;
  for (const auto& b : val_batches) {
    val_labels.insert(val_labels.end(), b.labels.begin(), b.labels.end());
  }

  AdamOptimizer opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  TrainResult result;
  std::vector<Tensor> best_params = net.snapshot_parameters();
  double best_f1 = -1.0;
  int best_epoch = 0;

  std::vector<std::size_t> order(data.train.size());
  for (int t = 1; t <= cfg.epochs; ++t) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(t)));
    shuffle_rng.shuffle(order);
    Rng offset_rng(derive_seed(cfg.seed, "offset", static_cast<std::uint64_t>(t)));

    double loss_sum = 0.0;
    std::int64_t seen = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const PreparedRecord*> ptrs;
      std::vector<std::int64_t> offsets;
      for (std::size_t i = start; i < stop; ++i) {
        const PreparedRecord& rec = data.train[order[i]];
        ptrs.push_back(&rec);
        offsets.push_back(offset_rng.uniform_int(0, target_len - rec.core.dim(1)));
      }
      MaskedBatch batch = make_batch(ptrs, target_len, offsets);

      NodePtr loss;
      switch (cfg.method) {
        case TrainMethod::kCe:
          loss = loss_ce(net.forward(batch), batch.labels);
          break;
        case TrainMethod::kAdv:
          loss = loss_adv(net, batch, cfg, t,
                          derive_seed(cfg.seed, "attack", static_cast<std::uint64_t>(t),
                                      static_cast<std::uint64_t>(batch_index)));
          break;
        case TrainMethod::kJacob:
          loss = loss_jacobian(net, batch, cfg, t);
          break;
        case TrainMethod::kNsr: {
          NsrTerms terms = t <= cfg.warmup_epochs ? nsr_terms_warmup(net, batch)
                                                  : nsr_bound(net, batch, cfg.eps_max);
          loss = loss_nsr(terms.logits, terms, batch.labels, cfg.beta, t, cfg.warmup_epochs);
          break;
        }
      }

      const double lv = loss->value().item();
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(t) + " batch " +
                           std::to_string(batch_index));
      }
      backward(loss);
      opt.step(net);
      loss_sum += lv * static_cast<double>(batch.size());
      seen += batch.size();
    }

    std::vector<int> preds;
    for (const MaskedBatch& b : val_batches) {
      const Tensor logits = net.forward_values(b.signals, b.mask);
      for (int p : argmax_rows(logits)) preds.push_back(p);
    }
    const double acc = accuracy(preds, val_labels);
    const double f1 = macro_f1(preds, val_labels, n_classes);
    const double eps_t = cfg.method == TrainMethod::kAdv
                             ? ramp_epsilon(t, cfg.epochs, cfg.epsilon, cfg.warmup_epochs)
                             : 0.0;
    result.history.push_back({t, loss_sum / static_cast<double>(seen), acc, f1, eps_t});

    // ties go to the later epoch: with ramped adversarial training the clean
    // F1 plateaus early while robustness keeps improving
    if (f1 >= best_f1) {
      best_f1 = f1;
      best_epoch = t;
      best_params = net.snapshot_parameters();
    }
  }

  net.restore_parameters(best_params);
  result.best_epoch = best_epoch;
  result.best_val_f1 = best_f1;
  return result;
}

void write_history_csv(const std::vector<EpochStats>& history,
                       const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("history: cannot write " + path.string());
  os << "epoch,loss,val_acc,val_f1,epsilon_t\n";
  for (const EpochStats& e : history) {
    os << e.epoch << ',' << format_double(e.loss) << ',' << format_double(e.val_acc) << ','
       << format_double(e.val_f1) << ',' << format_double(e.epsilon_t) << '\n';
  }
}

}  // namespace ecgrobust
