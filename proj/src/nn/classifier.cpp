#include "davdd/classifier.hpp"

#include "davdd/error.hpp"

namespace davdd {

FusedClassifier make_fused_classifier(const PairConfig& config, std::size_t num_classes,
                                      std::uint64_t seed) {
  config.validate();
  FusedClassifier m;
  m.audio = build_encoder(config.audio, seed * 3 + 1);
  m.visual = build_encoder(config.visual, seed * 3 + 2);
  m.head = build_linear(2 * config.feature_dim(), num_classes, seed * 3 + 3);
  return m;
}

std::vector<double> train_classifier(FusedClassifier& model, const PairedDataset& train,
                                     const TrainOptions& options, std::uint64_t seed) {
  require_train_split(train, "classifier training");
  if (train.size() == 0) throw ContractError("cannot train on an empty dataset");
  if (options.epochs == 0) throw ConfigError("epochs must be at least 1");
  SgdState sa{{}, options.lr, options.momentum};
  SgdState sv = sa, sh = sa;
  BatchIterator batches(train, options.batch_size, seed);
  std::vector<double> history;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    double total = 0.0;
    for (const auto& rows : batches.next_epoch()) {
      const PairedDataset b = train.subset(rows);
      Tape tape;
      BoundModel a = bind(tape, model.audio), v = bind(tape, model.visual),
                 h = bind(tape, model.head);
      Var logits = fuse_and_classify(a(tape.constant(b.audio)), v(tape.constant(b.visual)), h);
      Var loss = cross_entropy(logits, b.labels);
      Gradients g = tape.backward(loss);
      sgd_step(model.audio, parameter_grads(g, a), sa);
      sgd_step(model.visual, parameter_grads(g, v), sv);
      sgd_step(model.head, parameter_grads(g, h), sh);
      total += loss.value().item() * static_cast<double>(rows.size());
    }
    history.push_back(total / static_cast<double>(train.size()));
  }
  return history;
}

Tensor predict_logits(const FusedClassifier& model, const PairedDataset& ds) {
  Tape tape;
  BoundModel a = bind_constant(tape, model.audio), v = bind_constant(tape, model.visual),
             h = bind_constant(tape, model.head);
  return fuse_and_classify(a(tape.constant(ds.audio)), v(tape.constant(ds.visual)), h).value();
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("accuracy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("accuracy of an empty set");
  const std::size_t c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    correct += static_cast<int>(best) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Model train_linear_probe(const Tensor& features, std::span<const int> labels,
                         std::size_t num_classes, const TrainOptions& options, std::uint64_t seed) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("train_linear_probe: features " + shape_str(features.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  PairedDataset rows{features, features, {labels.begin(), labels.end()}, num_classes,
                     Split::kTrain};
  rows.validate();
  Model head = build_linear(features.dim(1), num_classes, seed);
  SgdState state{{}, options.lr, options.momentum};
  BatchIterator batches(rows, options.batch_size, seed);
  for (std::size_t e = 0; e < options.epochs; ++e) {
    for (const auto& idx : batches.next_epoch()) {
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(labels[i]);
      Tape tape;
      BoundModel h = bind(tape, head);
      Var loss = cross_entropy(h(tape.constant(features.gather_rows(idx))), y);
      sgd_step(head, parameter_grads(tape.backward(loss), h), state);
    }
  }
  return head;
}

Tensor linear_logits(const Model& head, const Tensor& features) {
  Tape tape;
  return bind_constant(tape, head)(tape.constant(features)).value();
}

}  // namespace davdd
