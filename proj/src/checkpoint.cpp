// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <fstream>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/train.hpp"

namespace moelab {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', '0', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out_.append(buf, sizeof(U));
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  template <typename T>
  void put_tensors(const ModelParams<T>& params) {
    std::uint64_t count = 0;
    params.for_each([&](const std::string&, const Matrix<T>&, ParamRole) { ++count; });
    put<std::uint64_t>(count);
    params.for_each([&](const std::string& name, const Matrix<T>& m, ParamRole) {
      put_string(name);
      put<std::uint64_t>(m.rows);
      put<std::uint64_t>(m.cols);
      out_.append(reinterpret_cast<const char*>(m.data.data()), m.data.size() * sizeof(T));
    });
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  template <typename T>
  void get_tensors(ModelParams<T>& params) {
    std::uint64_t expected = 0;
    params.for_each([&](const std::string&, Matrix<T>&, ParamRole) { ++expected; });
    if (get<std::uint64_t>() != expected) throw CheckpointError("checkpoint tensor count does not match its config");
    params.for_each([&](const std::string& name, Matrix<T>& m, ParamRole) {
      if (get_string() != name) throw CheckpointError("checkpoint tensor order differs at '" + name + "'");
      const auto rows = get<std::uint64_t>();
      const auto cols = get<std::uint64_t>();
      if (rows != m.rows || cols != m.cols) throw CheckpointError("checkpoint tensor '" + name + "' has the wrong shape");
      need(m.data.size() * sizeof(T));
      std::memcpy(m.data.data(), in_.data() + pos_, m.data.size() * sizeof(T));
      pos_ += m.data.size() * sizeof(T);
    });
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint is truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
std::string checkpoint_bytes(const TrainRun<T>& run) {
  Writer w;
  w.bytes().append(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(sizeof(T));
  w.put<std::uint64_t>(config_digest(run.config));
  w.put_string(serialize_config(run.config));
  w.put<std::int64_t>(run.iteration);
  std::ostringstream rng;
  rng << run.rng;
  w.put_string(rng.str());
  w.put<std::uint64_t>(run.evals.size());
  for (const auto& e : run.evals) {
    w.put<std::int64_t>(e.iteration);
    w.put<double>(e.cross_entropy);
  }
  w.put_tensors(run.model.params);
  w.put<std::int64_t>(run.optimizer.step);
  w.put_tensors(run.optimizer.m);
  w.put_tensors(run.optimizer.v);
  w.put<std::uint64_t>(fnv1a(w.bytes()));
  return std::move(w.bytes());
}

template <typename T>
TrainRun<T> checkpoint_from_bytes(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < sizeof(kMagic) + 16) throw CheckpointError("checkpoint is truncated");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(bytes.substr(0, bytes.size() - 8)) != stored) {
    throw CheckpointError("checkpoint digest mismatch (file is corrupt or truncated)");
  }
  Reader r(bytes.substr(0, bytes.size() - 8));
  r.get<std::uint64_t>();
  if (r.get<std::uint32_t>() != kVersion) throw CheckpointError("unsupported checkpoint version");
  const auto width = r.get<std::uint32_t>();
  if (width != sizeof(T)) {
    throw CheckpointError("checkpoint holds " + std::to_string(width * 8) + "-bit scalars, expected " +
                          std::to_string(sizeof(T) * 8));
  }
  const auto digest = r.get<std::uint64_t>();
  ExperimentConfig config;
  try {
    config = parse_config(r.get_string());
  } catch (const ParseError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  if (config_digest(config) != digest) throw CheckpointError("checkpoint config digest mismatch");

  TrainRun<T> run;
  run.config = config;
  run.model.config = config;
  run.model.params = build_model<T>(config, 0).params;
  run.iteration = r.get<std::int64_t>();
  std::istringstream rng(r.get_string());
  rng >> run.rng;
  if (!rng) throw CheckpointError("checkpoint RNG state is unreadable");
  const auto n_evals = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_evals; ++i) {
    EvalResult e;
    e.iteration = r.get<std::int64_t>();
    e.cross_entropy = r.get<double>();
    e.perplexity = std::exp(e.cross_entropy);
    run.evals.push_back(e);
  }
  r.get_tensors(run.model.params);
  run.optimizer.step = r.get<std::int64_t>();
  run.optimizer.m = run.model.params.zeros_like();
  run.optimizer.v = run.model.params.zeros_like();
  r.get_tensors(run.optimizer.m);
  r.get_tensors(run.optimizer.v);
  if (r.position() != bytes.size() - 8) throw CheckpointError("trailing bytes in checkpoint");
  return run;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainRun<T>& run) {
  const auto bytes = checkpoint_bytes(run);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("error writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
TrainRun<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_bytes<T>(buf.str());
}

Precision checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path.string() + "'");
  char head[16] = {};
  in.read(head, sizeof(head));
  if (in.gcount() != sizeof(head) || std::memcmp(head, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  std::uint32_t width = 0;
  std::memcpy(&width, head + 12, 4);
  if (width == 4) return Precision::float32;
  if (width == 8) return Precision::float64;
  throw CheckpointError("checkpoint has an unsupported scalar width");
}

#define MOELAB_INSTANTIATE_CHECKPOINT(T)                                               \
  template std::string checkpoint_bytes<T>(const TrainRun<T>&);                        \
  template TrainRun<T> checkpoint_from_bytes<T>(std::string_view);                     \
  template void save_checkpoint<T>(const std::filesystem::path&, const TrainRun<T>&);  \
  template TrainRun<T> load_checkpoint<T>(const std::filesystem::path&);

MOELAB_INSTANTIATE_CHECKPOINT(float)
MOELAB_INSTANTIATE_CHECKPOINT(double)

}  // namespace moelab
