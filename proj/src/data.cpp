#include "mexit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace mexit {

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  Dataset d;
  d.num_classes = num_classes;
  if (indices.empty()) return d;
  d.images = images.gather(indices);
  if (has_labels())
    for (Index i : indices) d.labels.push_back(labels[static_cast<std::size_t>(i)]);
  return d;
}

Dataset concat(const std::vector<Dataset>& parts) {
  Dataset out;
  Index n = 0;
  const Dataset* first = nullptr;
  for (const auto& p : parts)
    if (p.size() > 0) {
      if (!first) first = &p;
      if (p.sample_shape() != first->sample_shape()) throw ConfigError("concat: sample shapes differ");
      n += p.size();
    }
  if (!first) return out;
  Shape s = first->images.shape();
  s[0] = n;
  out.images = Tensorf(s);
  out.num_classes = first->num_classes;
  Index at = 0;
  bool labelled = true;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    out.images.vec().segment(at, p.images.size()) = p.images.vec();
    at += p.images.size();
    labelled = labelled && p.has_labels();
    out.num_classes = std::max(out.num_classes, p.num_classes);
  }
  if (labelled)
    for (const auto& p : parts) out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  return out;
}

UserDistribution user_distribution_at(Index num_classes, double sigma, Index center) {
  if (num_classes < 2) throw ConfigError("user distribution needs at least 2 classes");
  if (!(sigma > 0.0)) throw ConfigError("user distribution sigma must be positive");
  UserDistribution d;
  d.center = center;
  d.sigma = sigma;
  d.probs.resize(static_cast<std::size_t>(num_classes));
  double total = 0.0;
  for (Index c = 0; c < num_classes; ++c) {
    const Index raw = std::abs(c - center);
    const auto dist = static_cast<double>(std::min(raw, num_classes - raw));
    total += d.probs[static_cast<std::size_t>(c)] = std::exp(-dist * dist / (2.0 * sigma * sigma));
  }
  for (auto& p : d.probs) p /= total;
  return d;
}

UserDistribution gen_user_distribution(Index num_classes, double sigma, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("user distribution needs at least 2 classes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, num_classes - 1);
  UserDistribution d = user_distribution_at(num_classes, sigma, pick(rng));
  d.seed = seed;
  return d;
}

namespace {

std::vector<std::vector<Index>> indices_by_class(const Dataset& data) {
  if (!data.has_labels()) throw ConfigError("dataset has no labels");
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    const Index y = data.labels[i];
    if (y < 0 || y >= data.num_classes) throw ConfigError("label out of range in dataset");
    by_class[static_cast<std::size_t>(y)].push_back(static_cast<Index>(i));
  }
  return by_class;
}

}  // namespace

Dataset sample_user_dataset(const Dataset& global, const UserDistribution& dist, Index n, std::uint64_t seed,
                            std::vector<Index>* indices) {
  if (n < 1) throw ConfigError("sample_user_dataset: n must be >= 1");
  if (static_cast<Index>(dist.probs.size()) != global.num_classes)
    throw ConfigError("sample_user_dataset: distribution and dataset class counts differ");
  const auto by_class = indices_by_class(global);
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (dist.probs[c] > 0.0 && by_class[c].empty())
      throw ConfigError("sample_user_dataset: class " + std::to_string(c) + " is absent from the global data");
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick_class(dist.probs.begin(), dist.probs.end());
  std::vector<Index> chosen;
  chosen.reserve(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    const auto& pool = by_class[pick_class(rng)];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    chosen.push_back(pool[pick(rng)]);
  }
  if (indices) *indices = chosen;
  return global.subset(chosen);
}

std::vector<UserSplit> partition_users(const Dataset& global, Index n_users, Index samples_per_user,
                                       Index test_per_user, double sigma, std::uint64_t seed) {
  if (n_users < 1 || samples_per_user < 1) throw ConfigError("partition_users: need >= 1 user and >= 1 sample");
  if (test_per_user < 0 || test_per_user >= samples_per_user)
    throw ConfigError("partition_users: held-out count must be in [0, samples_per_user)");
  if (n_users * samples_per_user > global.size())
    throw ConfigError("partition_users: insufficient data (" + std::to_string(global.size()) + " samples for " +
                      std::to_string(n_users) + " x " + std::to_string(samples_per_user) + ")");
  auto pools = indices_by_class(global);
  std::mt19937_64 rng(seed);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);

  std::vector<UserSplit> users;
  for (Index u = 0; u < n_users; ++u) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(u), std::uint64_t{0x75736572}};
    std::mt19937_64 user_rng(seq);
    UserSplit split;
    split.distribution = gen_user_distribution(global.num_classes, sigma, user_rng());
    std::vector<Index> mine;
    for (Index k = 0; k < samples_per_user; ++k) {
      std::vector<double> w(pools.size());
      for (std::size_t c = 0; c < pools.size(); ++c) w[c] = pools[c].empty() ? 0.0 : split.distribution.probs[c];
      if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0)
        for (std::size_t c = 0; c < pools.size(); ++c) w[c] = pools[c].empty() ? 0.0 : 1.0;
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      auto& pool = pools[pick(user_rng)];
      mine.push_back(pool.back());
      pool.pop_back();
    }
    std::shuffle(mine.begin(), mine.end(), user_rng);
    split.test_indices.assign(mine.begin(), mine.begin() + test_per_user);
    split.train_indices.assign(mine.begin() + test_per_user, mine.end());
    split.train = global.subset(split.train_indices);
    split.test = global.subset(split.test_indices);
    users.push_back(std::move(split));
  }
  return users;
}

std::pair<Dataset, Dataset> split_calibration(const Dataset& data, double fraction, std::uint64_t seed,
                                              std::vector<Index>* train_idx, std::vector<Index>* calib_idx) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("calibration fraction must be in (0, 1)");
  if (data.size() < 2) throw ConfigError("need at least two samples to split off a calibration set");
  std::vector<Index> perm(static_cast<std::size_t>(data.size()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto n_calib = static_cast<Index>(std::llround(fraction * static_cast<double>(data.size())));
  n_calib = std::clamp<Index>(n_calib, 1, data.size() - 1);
  std::vector<Index> calib(perm.begin(), perm.begin() + n_calib);
  std::vector<Index> train(perm.begin() + n_calib, perm.end());
  std::sort(calib.begin(), calib.end());
  std::sort(train.begin(), train.end());
  if (train_idx) *train_idx = train;
  if (calib_idx) *calib_idx = calib;
  return {data.subset(train), data.subset(calib)};
}

Dataset generate_synthetic(const SyntheticSpec& spec, Index n, std::uint64_t seed,
                           const std::vector<double>& class_probs) {
  if (spec.sample_shape.size() != 3) throw ConfigError("synthetic sample shape must be CxHxW");
  if (spec.num_classes < 2 || n < 1) throw ConfigError("synthetic data needs >= 2 classes and >= 1 sample");
  const Index c_n = spec.sample_shape[0], h = spec.sample_shape[1], w = spec.sample_shape[2];
  const double margin = std::min<double>(3.0, static_cast<double>(std::min(h, w)) / 4.0);

  struct Blob {
    double y, x;
    std::vector<double> colour;
  };
  std::mt19937_64 task_rng(spec.task_seed);
  std::uniform_real_distribution<double> ypos(margin, static_cast<double>(h) - 1.0 - margin);
  std::uniform_real_distribution<double> xpos(margin, static_cast<double>(w) - 1.0 - margin);
  std::uniform_real_distribution<double> hue(0.3, 1.0);
  auto random_colour = [&](std::mt19937_64& r) {
    std::vector<double> col(static_cast<std::size_t>(c_n), 1.0);
    if (c_n > 1)
      for (auto& v : col) v = hue(r);
    return col;
  };
  std::vector<std::vector<Blob>> templates(static_cast<std::size_t>(spec.num_classes));
  for (auto& t : templates)
    for (Index b = 0; b < spec.blobs_per_class; ++b) {
      const double y = ypos(task_rng), x = xpos(task_rng);
      t.push_back({y, x, random_colour(task_rng)});
    }

  std::vector<double> probs = class_probs;
  if (probs.empty()) probs.assign(static_cast<std::size_t>(spec.num_classes), 1.0);
  if (static_cast<Index>(probs.size()) != spec.num_classes) throw ConfigError("class_probs length must equal K");

  Dataset d;
  d.num_classes = spec.num_classes;
  d.images = Tensorf({n, c_n, h, w});
  d.labels.resize(static_cast<std::size_t>(n));
  std::mt19937_64 rng(seed);
  std::discrete_distribution<Index> pick_class(probs.begin(), probs.end());
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> amp(0.5, 1.0);
  const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
  std::vector<double> img(static_cast<std::size_t>(c_n * h * w));

  auto draw = [&](double cy, double cx, double a, const std::vector<double>& colour) {
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double v = a * std::exp(-(dy * dy + dx * dx) * inv2s2);
        for (Index c = 0; c < c_n; ++c) img[static_cast<std::size_t>((c * h + y) * w + x)] += v * colour[static_cast<std::size_t>(c)];
      }
  };

  for (Index s = 0; s < n; ++s) {
    const Index label = pick_class(rng);
    d.labels[static_cast<std::size_t>(s)] = label;
    std::fill(img.begin(), img.end(), 0.0);
    for (const auto& b : templates[static_cast<std::size_t>(label)]) {
      const double a = std::max(0.2, 1.0 + spec.amplitude_jitter * unit(rng));
      const double y = b.y + spec.position_jitter * unit(rng);
      const double x = b.x + spec.position_jitter * unit(rng);
      draw(y, x, a, b.colour);
    }
    for (Index k = 0; k < spec.distractor_blobs; ++k) {
      const double y = ypos(rng), x = xpos(rng), a = amp(rng);
      draw(y, x, a, random_colour(rng));
    }
    auto out = d.images.slice(s);
    for (std::size_t i = 0; i < img.size(); ++i)
      out[static_cast<Index>(i)] = static_cast<float>(std::clamp(img[i] + spec.pixel_noise * unit(rng), 0.0, 1.0));
  }
  return d;
}

namespace {

void put_be32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

IdxHeader parse_idx(const std::vector<unsigned char>& bytes, const std::string& path) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08)
    throw LoadError("bad IDX magic (expected unsigned-byte payload): " + path);
  const std::size_t ndims = bytes[3];
  if (ndims == 0 || bytes.size() < 4 + 4 * ndims) throw LoadError("truncated IDX header: " + path);
  IdxHeader h;
  std::size_t total = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    const unsigned char* p = bytes.data() + 4 + 4 * d;
    const std::uint32_t v = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
    if (v == 0) throw LoadError("IDX file has a zero extent: " + path);
    h.dims.push_back(v);
    total *= v;
  }
  h.payload_offset = 4 + 4 * ndims;
  if (bytes.size() - h.payload_offset < total) throw LoadError("truncated IDX payload: " + path);
  if (bytes.size() - h.payload_offset > total) throw LoadError("IDX file has trailing bytes: " + path);
  return h;
}

}  // namespace

void save_idx_images(const Tensorf& images, const std::string& path) {
  if (images.rank() != 4) throw ConfigError("save_idx_images expects NxCxHxW");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  const bool gray = images.dim(1) == 1;
  const unsigned char magic[4] = {0, 0, 0x08, static_cast<unsigned char>(gray ? 3 : 4)};
  os.write(reinterpret_cast<const char*>(magic), 4);
  put_be32(os, static_cast<std::uint32_t>(images.dim(0)));
  if (!gray) put_be32(os, static_cast<std::uint32_t>(images.dim(1)));
  put_be32(os, static_cast<std::uint32_t>(images.dim(2)));
  put_be32(os, static_cast<std::uint32_t>(images.dim(3)));
  std::vector<unsigned char> payload(static_cast<std::size_t>(images.size()));
  for (Index i = 0; i < images.size(); ++i)
    payload[static_cast<std::size_t>(i)] =
        static_cast<unsigned char>(std::lround(std::clamp(images[i], 0.0f, 1.0f) * 255.0f));
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw ConfigError("failed writing " + path);
}

void save_idx_labels(const std::vector<Index>& labels, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  const unsigned char magic[4] = {0, 0, 0x08, 1};
  os.write(reinterpret_cast<const char*>(magic), 4);
  put_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (Index y : labels) {
    if (y < 0 || y > 255) throw ConfigError("IDX labels must fit in one byte");
    const auto b = static_cast<char>(static_cast<unsigned char>(y));
    os.write(&b, 1);
  }
  if (!os) throw ConfigError("failed writing " + path);
}

Tensorf load_idx_images(const std::string& path) {
  const auto bytes = read_all(path);
  const auto h = parse_idx(bytes, path);
  Shape shape;
  if (h.dims.size() == 3)
    shape = {h.dims[0], 1, h.dims[1], h.dims[2]};
  else if (h.dims.size() == 4)
    shape = {h.dims[0], h.dims[1], h.dims[2], h.dims[3]};
  else
    throw LoadError("IDX image file must have 3 or 4 dimensions: " + path);
  Tensorf t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(bytes[h.payload_offset + static_cast<std::size_t>(i)]) / 255.0f;
  return t;
}

std::vector<Index> load_idx_labels(const std::string& path) {
  const auto bytes = read_all(path);
  const auto h = parse_idx(bytes, path);
  if (h.dims.size() != 1) throw LoadError("IDX label file must have 1 dimension: " + path);
  std::vector<Index> labels(h.dims[0]);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = bytes[h.payload_offset + i];
  return labels;
}

void save_dataset(const Dataset& data, const std::string& prefix) {
  save_idx_images(data.images, prefix + "-images.idx");
  save_idx_labels(data.labels, prefix + "-labels.idx");
}

Dataset load_dataset(const std::string& images_path, const std::string& labels_path, Index num_classes) {
  Dataset d;
  d.images = load_idx_images(images_path);
  d.labels = load_idx_labels(labels_path);
  if (static_cast<Index>(d.labels.size()) != d.size())
    throw LoadError("image and label counts differ: " + images_path + " vs " + labels_path);
  const Index max_label = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end());
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  if (max_label >= d.num_classes) throw LoadError("label exceeds class count in " + labels_path);
  return d;
}

Dataset load_dataset(const std::string& prefix, Index num_classes) {
  return load_dataset(prefix + "-images.idx", prefix + "-labels.idx", num_classes);
}

void write_manifest(const std::vector<UserSplit>& users, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  auto join = [](const std::vector<Index>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "users = " << users.size() << '\n';
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto& s = users[u];
    os << "user." << u << ".center = " << s.distribution.center << '\n';
    os << "user." << u << ".sigma = " << s.distribution.sigma << '\n';
    os << "user." << u << ".train_count = " << s.train_indices.size() << '\n';
    os << "user." << u << ".test_count = " << s.test_indices.size() << '\n';
    os << "user." << u << ".train_indices = " << join(s.train_indices) << '\n';
    os << "user." << u << ".test_indices = " << join(s.test_indices) << '\n';
  }
}

}  // namespace mexit
