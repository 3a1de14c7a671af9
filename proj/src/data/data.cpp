#include "davdd/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <random>

#include "davdd/error.hpp"

namespace davdd {

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw IoError("unknown split tag '" + s + "'");
}

Shape PairedDataset::audio_shape() const {
  return Shape(audio.shape().begin() + 1, audio.shape().end());
}

Shape PairedDataset::visual_shape() const {
  return Shape(visual.shape().begin() + 1, visual.shape().end());
}

void PairedDataset::validate() const {
  if (audio.rank() < 2 || visual.rank() < 2) {
    throw ContractError("dataset tensors need a leading sample axis");
  }
  if (audio.dim(0) != labels.size() || visual.dim(0) != labels.size()) {
    throw ContractError("dataset leading extents disagree: audio " + shape_str(audio.shape()) +
                        ", visual " + shape_str(visual.shape()) + ", " +
                        std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }
}

PairedDataset PairedDataset::subset(std::span<const std::size_t> indices) const {
  PairedDataset out;
  out.audio = audio.gather_rows(indices);
  out.visual = visual.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  out.num_classes = num_classes;
  out.split = split;
  return out;
}

std::vector<std::size_t> PairedDataset::class_indices(int c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

std::uint64_t PairedDataset::pairing_checksum() const {
  const std::size_t ar = audio.row_size(), vr = visual.row_size();
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < size(); ++i) {
    std::string bytes(sizeof(double) * (ar + vr) + sizeof(int), '\0');
    std::memcpy(bytes.data(), audio.data().data() + i * ar, sizeof(double) * ar);
    std::memcpy(bytes.data() + sizeof(double) * ar, visual.data().data() + i * vr,
                sizeof(double) * vr);
    std::memcpy(bytes.data() + sizeof(double) * (ar + vr), &labels[i], sizeof(int));
    total += fnv1a64(bytes);
  }
  return total;
}

void require_train_split(const PairedDataset& ds, const char* stage) {
  if (ds.split != Split::kTrain) {
    throw ContractError(std::string(stage) + " refuses a test-tagged dataset");
  }
}

void BenchmarkSpec::validate() const {
  if (num_classes < 2) throw ConfigError("benchmark needs at least 2 classes");
  if (samples_per_class < 2) throw ConfigError("benchmark needs >= 2 samples per class");
  if (shared_dim == 0 || private_dim == 0) throw ConfigError("latent dims must be positive");
  if (noise < 0 || shared_jitter < 0 || private_jitter < 0) {
    throw ConfigError("noise and jitter scales must be non-negative");
  }
  if (audio_shape.size() != 3 || visual_shape.size() != 3 || shape_numel(audio_shape) == 0 ||
      shape_numel(visual_shape) == 0) {
    throw ConfigError("modality shapes must be positive [C x H x W]");
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
}

void to_json(Json& j, const BenchmarkSpec& s) {
  j = Json{{"num_classes", s.num_classes},   {"samples_per_class", s.samples_per_class},
           {"shared_dim", s.shared_dim},     {"private_dim", s.private_dim},
           {"noise", s.noise},               {"shared_jitter", s.shared_jitter},
           {"private_jitter", s.private_jitter}, {"audio_shape", s.audio_shape},
           {"visual_shape", s.visual_shape}, {"test_fraction", s.test_fraction},
           {"seed", s.seed}};
}

void from_json(const Json& j, BenchmarkSpec& s) {
  BenchmarkSpec d;
  s.num_classes = j.value("num_classes", d.num_classes);
  s.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  s.shared_dim = j.value("shared_dim", d.shared_dim);
  s.private_dim = j.value("private_dim", d.private_dim);
  s.noise = j.value("noise", d.noise);
  s.shared_jitter = j.value("shared_jitter", d.shared_jitter);
  s.private_jitter = j.value("private_jitter", d.private_jitter);
  s.audio_shape = j.value("audio_shape", d.audio_shape);
  s.visual_shape = j.value("visual_shape", d.visual_shape);
  s.test_fraction = j.value("test_fraction", d.test_fraction);
  s.seed = j.value("seed", d.seed);
}

namespace {

// Fixed renderer: `latents` unit-RMS smooth patterns over a [C x H x W] canvas.
class Renderer {
 public:
  Renderer(const Shape& shape, std::size_t latents, std::mt19937_64& rng)
      : pixels_(shape_numel(shape)), latents_(latents), patterns_(latents * pixels_) {
    const std::size_t C = shape[0], H = shape[1], W = shape[2];
    std::uniform_int_distribution<int> freq(0, 2);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> amp(0.0, 1.0);
    for (std::size_t d = 0; d < latents; ++d) {
      double* p = &patterns_[d * pixels_];
      for (std::size_t c = 0; c < C; ++c)
        for (int k = 0; k < 3; ++k) {
          const double fu = freq(rng), fv = freq(rng), ph = phase(rng), a = amp(rng);
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
              p[(c * H + y) * W + x] +=
                  a * std::cos(2.0 * std::numbers::pi * (fu * y / H + fv * x / W) + ph);
        }
      double rms = 0.0;
      for (std::size_t i = 0; i < pixels_; ++i) rms += p[i] * p[i];
      rms = std::sqrt(rms / static_cast<double>(pixels_));
      if (rms > 0) {
        for (std::size_t i = 0; i < pixels_; ++i) p[i] /= rms;
      }
    }
  }

  // out += (sum_d z_d * pattern_d) / sqrt(total latent count)
  void render(std::span<const double> z, double gain, std::span<double> out) const {
    for (std::size_t d = 0; d < latents_; ++d) {
      const double w = z[d] * gain;
      const double* p = &patterns_[d * pixels_];
      for (std::size_t i = 0; i < pixels_; ++i) out[i] += w * p[i];
    }
  }

 private:
  std::size_t pixels_;
  std::size_t latents_;
  std::vector<double> patterns_;
};

std::vector<double> draw(std::size_t n, double scale, std::normal_distribution<double>& nd,
                         std::mt19937_64& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * nd(rng);
  return v;
}

}  // namespace

Benchmark generate_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> nd(0.0, 1.0);

  const Renderer audio_shared(spec.audio_shape, spec.shared_dim, rng);
  const Renderer audio_private(spec.audio_shape, spec.private_dim, rng);
  const Renderer visual_shared(spec.visual_shape, spec.shared_dim, rng);
  const Renderer visual_private(spec.visual_shape, spec.private_dim, rng);
  const double gain = 1.0 / std::sqrt(static_cast<double>(spec.shared_dim + spec.private_dim));

  std::vector<std::vector<double>> shared_t, audio_t, visual_t;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    shared_t.push_back(draw(spec.shared_dim, 1.0, nd, rng));
    audio_t.push_back(draw(spec.private_dim, 1.0, nd, rng));
    visual_t.push_back(draw(spec.private_dim, 1.0, nd, rng));
  }

  const std::size_t ap = shape_numel(spec.audio_shape), vp = shape_numel(spec.visual_shape);
  const std::size_t total = spec.num_classes * spec.samples_per_class;
  std::vector<double> audio(total * ap), visual(total * vp);
  std::vector<int> labels(total);

  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      const std::size_t i = c * spec.samples_per_class + k;
      labels[i] = static_cast<int>(c);
      std::vector<double> s = draw(spec.shared_dim, spec.shared_jitter, nd, rng);
      std::vector<double> pa = draw(spec.private_dim, spec.private_jitter, nd, rng);
      std::vector<double> pv = draw(spec.private_dim, spec.private_jitter, nd, rng);
      for (std::size_t d = 0; d < spec.shared_dim; ++d) s[d] += shared_t[c][d];
      for (std::size_t d = 0; d < spec.private_dim; ++d) {
        pa[d] += audio_t[c][d];
        pv[d] += visual_t[c][d];
      }
      std::span<double> a(&audio[i * ap], ap), v(&visual[i * vp], vp);
      audio_shared.render(s, gain, a);
      audio_private.render(pa, gain, a);
      visual_shared.render(s, gain, v);
      visual_private.render(pv, gain, v);
      if (spec.noise > 0) {
        for (double& x : a) x += spec.noise * nd(rng);
        for (double& x : v) x += spec.noise * nd(rng);
      }
    }
  }

  Shape as{total}, vs{total};
  as.insert(as.end(), spec.audio_shape.begin(), spec.audio_shape.end());
  vs.insert(vs.end(), spec.visual_shape.begin(), spec.visual_shape.end());
  PairedDataset all{Tensor(as, std::move(audio)), Tensor(vs, std::move(visual)),
                    std::move(labels), spec.num_classes, Split::kTrain};

  std::vector<std::size_t> train_rows, test_rows;
  const std::size_t n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(spec.test_fraction * spec.samples_per_class)), 1,
      spec.samples_per_class - 1);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::vector<std::size_t> rows(spec.samples_per_class);
    for (std::size_t k = 0; k < rows.size(); ++k) rows[k] = c * spec.samples_per_class + k;
    std::shuffle(rows.begin(), rows.end(), rng);
    std::sort(rows.begin(), rows.begin() + static_cast<long>(n_test));
    std::sort(rows.begin() + static_cast<long>(n_test), rows.end());
    test_rows.insert(test_rows.end(), rows.begin(), rows.begin() + static_cast<long>(n_test));
    train_rows.insert(train_rows.end(), rows.begin() + static_cast<long>(n_test), rows.end());
  }
  Benchmark b{all.subset(train_rows), all.subset(test_rows)};
  b.test.split = Split::kTest;
  return b;
}

Selection herding_select(const Tensor& features, std::span<const int> labels,
                         std::size_t num_classes, std::size_t ipc) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("herding_select: features " + shape_str(features.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t d = features.dim(1);
  Selection out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == static_cast<int>(c)) rows.push_back(i);
    if (ipc > rows.size()) {
      throw ContractError("herding_select: ipc " + std::to_string(ipc) + " exceeds class " +
                          std::to_string(c) + " size " + std::to_string(rows.size()));
    }
    std::vector<double> mean(d, 0.0), picked_sum(d, 0.0);
    for (std::size_t i : rows)
      for (std::size_t j = 0; j < d; ++j) mean[j] += features.at(i, j);
    for (double& m : mean) m /= static_cast<double>(rows.size());

    std::vector<bool> used(rows.size(), false);
    for (std::size_t t = 1; t <= ipc; ++t) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        if (used[k]) continue;
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double r = mean[j] - (picked_sum[j] + features.at(rows[k], j)) / t;
          dist += r * r;
        }
        if (dist < best) {
          best = dist;
          best_k = k;
        }
      }
      used[best_k] = true;
      for (std::size_t j = 0; j < d; ++j) picked_sum[j] += features.at(rows[best_k], j);
      out[c].push_back(rows[best_k]);
    }
  }
  return out;
}

Selection random_select(std::span<const int> labels, std::size_t num_classes, std::size_t ipc,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Selection out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == static_cast<int>(c)) rows.push_back(i);
    if (ipc > rows.size()) {
      throw ContractError("random_select: ipc " + std::to_string(ipc) + " exceeds class " +
                          std::to_string(c) + " size " + std::to_string(rows.size()));
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    out[c].assign(rows.begin(), rows.begin() + static_cast<long>(ipc));
  }
  return out;
}

std::vector<std::size_t> flatten_selection(const Selection& s) {
  std::vector<std::size_t> out;
  for (const auto& c : s) out.insert(out.end(), c.begin(), c.end());
  return out;
}

BatchIterator::BatchIterator(const PairedDataset& ds, std::size_t batch_size,
                             std::uint64_t seed, std::optional<int> by_class)
    : batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!by_class || ds.labels[i] == *by_class) rows_.push_back(i);
}

std::vector<std::vector<std::size_t>> BatchIterator::next_epoch() {
  std::vector<std::size_t> order = rows_;
  std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ull * (epoch_ + 1)));
  std::shuffle(order.begin(), order.end(), rng);
  ++epoch_;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < order.size(); b += batch_size_) {
    batches.emplace_back(order.begin() + static_cast<long>(b),
                         order.begin() + static_cast<long>(std::min(b + batch_size_, order.size())));
  }
  return batches;
}

void save_dataset(const std::string& dir, const PairedDataset& ds, const Json& extra) {
  ds.validate();
  ensure_dir(dir);
  Tensor labels(Shape{ds.size()});
  for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = ds.labels[i];
  save_tensor(dir + "/audio.dvt", ds.audio);
  save_tensor(dir + "/visual.dvt", ds.visual);
  save_tensor(dir + "/labels.dvt", labels);
  Json m = extra;
  m["format"] = "davdd-dataset-1";
  m["split"] = to_string(ds.split);
  m["num_classes"] = ds.num_classes;
  m["size"] = ds.size();
  m["pairing_checksum"] = ds.pairing_checksum();
  m["checksums"] = {{"audio.dvt", hash_file(dir + "/audio.dvt")},
                    {"visual.dvt", hash_file(dir + "/visual.dvt")},
                    {"labels.dvt", hash_file(dir + "/labels.dvt")}};
  write_json(dir + "/manifest.json", m);
}

PairedDataset load_dataset(const std::string& dir) {
  const Json m = read_json(dir + "/manifest.json");
  for (const auto& [name, hash] : m.at("checksums").items()) {
    if (hash_file(dir + "/" + name) != hash.get<std::string>()) {
      throw IoError("checksum mismatch for " + dir + "/" + name);
    }
  }
  PairedDataset ds;
  ds.audio = load_tensor(dir + "/audio.dvt");
  ds.visual = load_tensor(dir + "/visual.dvt");
  const Tensor labels = load_tensor(dir + "/labels.dvt");
  for (double v : labels.data()) ds.labels.push_back(static_cast<int>(v));
  ds.num_classes = m.at("num_classes").get<std::size_t>();
  ds.split = parse_split(m.at("split").get<std::string>());
  ds.validate();
  return ds;
}

}  // namespace davdd
