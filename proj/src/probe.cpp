#include "idiolex/evalsuite.h"

#include "idiolex/encoder.h"
#include "idiolex/log.h"
#include "idiolex/optim.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace idiolex::eval {

namespace {

Mat sigmoid(const Mat& z) {
  return z.unaryExpr([](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Mat softmax_rows(const Mat& z) {
  Mat p = z;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    RowVec e = (z.row(i).array() - z.row(i).maxCoeff()).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

Mat target_matrix(const std::vector<LabelSet>& labels, const std::vector<std::string>& classes) {
  Mat t = Mat::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(classes.size()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (const auto& l : labels[i]) {
      auto it = std::lower_bound(classes.begin(), classes.end(), l);
      if (it == classes.end() || *it != l) throw UsageError("train_probe: label '" + l + "' does not occur in train");
      t(static_cast<Eigen::Index>(i), it - classes.begin()) = 1.0;
    }
  return t;
}

/// Summed loss over the batch and its gradient w.r.t. the logits, averaged over rows.
std::pair<double, Mat> head_loss(const Mat& z, const Mat& yb, const ProbeConfig& cfg) {
  const auto m = z.rows();
  const auto k = z.cols();
  double loss = 0.0;
  if (cfg.mode == ProbeMode::single_label) {
    const double smooth = cfg.label_smoothing;
    const Mat target = (1.0 - smooth) * yb.array() + smooth / static_cast<double>(k);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double lse = z.row(i).maxCoeff() + std::log((z.row(i).array() - z.row(i).maxCoeff()).exp().sum());
      loss -= (target.row(i).array() * (z.row(i).array() - lse)).sum();
    }
    return {loss, (softmax_rows(z) - target) / static_cast<double>(m)};
  }
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index c = 0; c < k; ++c) {
      const double x = z(i, c);
      loss += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - yb(i, c) * x;
    }
  return {loss, (sigmoid(z) - yb) / static_cast<double>(m)};
}

void check_probe_inputs(std::size_t n, std::size_t n_labels, std::size_t n_dev, std::size_t n_dev_labels,
                        const std::vector<LabelSet>& labels, const ProbeConfig& cfg) {
  if (n == 0) throw UsageError("train_probe: no training items");
  if (n_labels != n || n_dev_labels != n_dev) throw UsageError("train_probe: one label set per item required");
  if (n_dev == 0) throw UsageError("train_probe: dev split is empty");
  if (cfg.batch_size < 1 || cfg.max_epochs < 0) throw UsageError("train_probe: bad batch size or epoch count");
  if (cfg.mode == ProbeMode::single_label)
    for (const auto& l : labels)
      if (l.size() != 1) throw UsageError("train_probe: single-label mode needs exactly one label per item");
}

Probe empty_probe(const std::vector<LabelSet>& train_labels, const ProbeConfig& cfg) {
  std::vector<std::string> all;
  for (const auto& l : train_labels) all.insert(all.end(), l.begin(), l.end());
  Probe probe;
  probe.classes = label_set(all);
  probe.mode = cfg.mode;
  probe.threshold = cfg.threshold;
  return probe;
}

struct Schedule {
  long per_epoch = 0;
  long total = 0;
  long warmup = 0;
};

Schedule schedule_for(std::size_t n, const ProbeConfig& cfg) {
  Schedule s;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  s.per_epoch = static_cast<long>((n + bs - 1) / bs);
  s.total = s.per_epoch * cfg.max_epochs;
  s.warmup = static_cast<long>(std::ceil(cfg.warmup_ratio * static_cast<double>(s.total)));
  return s;
}

}  // namespace

Mat Probe::predict_proba(const Mat& x) const {
  Mat z = x * weight;
  z.rowwise() += bias;
  return mode == ProbeMode::single_label ? softmax_rows(z) : sigmoid(z);
}

std::vector<LabelSet> Probe::predict(const Mat& x) const {
  const Mat p = predict_proba(x);
  std::vector<LabelSet> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    auto& row = out[static_cast<std::size_t>(i)];
    if (mode == ProbeMode::single_label) {
      Eigen::Index top = 0;
      p.row(i).maxCoeff(&top);
      row.push_back(classes[static_cast<std::size_t>(top)]);
    } else {
      for (Eigen::Index c = 0; c < p.cols(); ++c)
        if (p(i, c) > threshold) row.push_back(classes[static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

Probe train_probe(const ProbeData& train, const ProbeData& dev, const ProbeConfig& cfg) {
  const auto n = static_cast<std::size_t>(train.x.rows());
  check_probe_inputs(n, train.labels.size(), static_cast<std::size_t>(dev.x.rows()), dev.labels.size(), train.labels,
                     cfg);
  Probe probe = empty_probe(train.labels, cfg);
  const Mat y = target_matrix(train.labels, probe.classes);
  target_matrix(dev.labels, probe.classes);  // rejects dev labels unseen in train

  const auto d = train.x.cols();
  const auto k = static_cast<Eigen::Index>(probe.classes.size());
  ag::Parameter w("probe.weight", Mat::Zero(d, k));
  ag::Parameter b("probe.bias", Mat::Zero(1, k));
  optim::AdamConfig acfg;
  acfg.weight_decay = cfg.weight_decay;
  optim::Adam adam({&w, &b}, acfg);
  const Schedule sched = schedule_for(n, cfg);

  auto snapshot = [&] {
    probe.weight = w.value;
    probe.bias = b.value.row(0);
  };
  snapshot();
  double best_f1 = -1.0;
  int since_best = 0;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const auto m = static_cast<Eigen::Index>(end - start);
      Mat xb(m, d), yb(m, k);
      for (std::size_t r = start; r < end; ++r) {
        xb.row(static_cast<Eigen::Index>(r - start)) = train.x.row(static_cast<Eigen::Index>(order[r]));
        yb.row(static_cast<Eigen::Index>(r - start)) = y.row(static_cast<Eigen::Index>(order[r]));
      }
      Mat z = xb * w.value;
      z.rowwise() += b.value.row(0);
      const auto [loss, grad] = head_loss(z, yb, cfg);
      epoch_loss += loss;
      w.grad = xb.transpose() * grad;
      b.grad = grad.colwise().sum();
      adam.step(optim::warmup_linear_decay_lr(cfg.learning_rate, ++step, sched.warmup, sched.total));
    }
    probe.epoch_losses.push_back(epoch_loss / static_cast<double>(n));

    Probe current = probe;
    current.weight = w.value;
    current.bias = b.value.row(0);
    const double f1 = macro_f1_multi(dev.labels, current.predict(dev.x));
    if (f1 > best_f1) {
      best_f1 = f1;
      since_best = 0;
      snapshot();
    } else if (++since_best >= cfg.patience) {
      logger()->debug("probe: early stop after epoch {}", epoch + 1);
      break;
    }
  }
  return probe;
}

Probe fine_tune_probe(encoder::StyleEncoder& enc, std::span<const std::string> train_texts,
                      std::span<const LabelSet> train_labels, std::span<const std::string> dev_texts,
                      std::span<const LabelSet> dev_labels, const ProbeConfig& cfg) {
  if (!enc.encoder) throw UsageError("fine_tune_probe: no encoder loaded");
  const std::size_t n = train_texts.size();
  const std::vector<LabelSet> train_sets(train_labels.begin(), train_labels.end());
  const std::vector<LabelSet> dev_sets(dev_labels.begin(), dev_labels.end());
  check_probe_inputs(n, train_sets.size(), dev_texts.size(), dev_sets.size(), train_sets, cfg);
  Probe probe = empty_probe(train_sets, cfg);
  const Mat y = target_matrix(train_sets, probe.classes);
  target_matrix(dev_sets, probe.classes);

  const auto d = static_cast<Eigen::Index>(enc.dim());
  const auto k = static_cast<Eigen::Index>(probe.classes.size());
  ag::Parameter w("probe.weight", Mat::Zero(d, k));
  ag::Parameter b("probe.bias", Mat::Zero(1, k));
  optim::AdamConfig acfg;
  acfg.weight_decay = cfg.weight_decay;
  optim::Adam head_opt({&w, &b}, acfg);
  const std::vector<ag::Parameter*> enc_params = enc.parameters();
  optim::Adam enc_opt(enc_params, acfg);
  const Schedule sched = schedule_for(n, cfg);

  std::vector<Mat> best_encoder;
  auto snapshot = [&] {
    probe.weight = w.value;
    probe.bias = b.value.row(0);
    best_encoder.clear();
    for (const auto* p : enc_params) best_encoder.push_back(p->value);
  };
  snapshot();
  double best_f1 = -1.0;
  int since_best = 0;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const auto m = static_cast<Eigen::Index>(end - start);
      Mat yb(m, k);
      head_opt.zero_grad();
      enc_opt.zero_grad();
      ag::Tape tape;
      ag::Binder bind(tape);
      std::vector<ag::Var> rows;
      for (std::size_t r = start; r < end; ++r) {
        rows.push_back(enc.pooled(bind, train_texts[order[r]]));
        yb.row(static_cast<Eigen::Index>(r - start)) = y.row(static_cast<Eigen::Index>(order[r]));
      }
      // The running mean stays frozen.
      const ag::Var e = ag::normalize_rows(ag::add_row(ag::vstack(rows), tape.constant(-enc.mean.mu)),
                                           encoder::kNormEpsilon);
      const ag::Var z = ag::add_row(ag::matmul(e, bind(w)), bind(b));
      auto [loss, grad] = head_loss(z.value(), yb, cfg);
      epoch_loss += loss;
      tape.backward(ag::attach_scalar(z, loss / static_cast<double>(m), std::move(grad)));
      const long t = ++step;
      head_opt.step(optim::warmup_linear_decay_lr(cfg.learning_rate, t, sched.warmup, sched.total));
      enc_opt.step(optim::warmup_linear_decay_lr(cfg.encoder_learning_rate, t, sched.warmup, sched.total));
    }
    probe.epoch_losses.push_back(epoch_loss / static_cast<double>(n));

    Probe current = probe;
    current.weight = w.value;
    current.bias = b.value.row(0);
    const double f1 = macro_f1_multi(dev_sets, current.predict(enc.embed(dev_texts)));
    if (f1 > best_f1) {
      best_f1 = f1;
      since_best = 0;
      snapshot();
    } else if (++since_best >= cfg.patience) {
      logger()->debug("probe fine-tuning: early stop after epoch {}", epoch + 1);
      break;
    }
  }
  for (std::size_t i = 0; i < enc_params.size(); ++i) enc_params[i]->value = best_encoder[i];
  return probe;
}

}  // namespace idiolex::eval
