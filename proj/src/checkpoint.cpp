#include "morph/checkpoint.hpp"

#include <fmt/format.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace morph {

namespace {

constexpr char kMagic[5] = {'M', 'O', 'R', 'P', 'H'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void u64(std::uint64_t v) { pod(v); }
  void i64(std::int64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void string(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(const double* data, std::size_t count) {
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  }
  void vector(const Vector& v) { doubles(v.data(), static_cast<std::size_t>(v.size())); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  double f64() { return pod<double>(); }
  std::string string() {
    const std::uint64_t n = u64();
    if (n > (1ULL << 32)) throw ConfigError(fmt::format("{}: corrupt string length", source_));
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  Vector vector(std::uint64_t n) {
    Vector v(static_cast<Index>(n));
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    check();
    return v;
  }

 private:
  void check() {
    if (!in_) throw ConfigError(fmt::format("{}: checkpoint is truncated", source_));
  }
  std::istream& in_;
  std::string source_;
};

}  // namespace

std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng deserialize_rng(const std::string& state) {
  std::istringstream in(state);
  Rng rng;
  in >> rng;
  if (!in) throw ConfigError("corrupt generator state in checkpoint");
  return rng;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto n_theta = static_cast<std::uint64_t>(c.theta.size());
  const auto n_psi = static_cast<std::uint64_t>(c.psi.size());
  const auto n_phi = static_cast<std::uint64_t>(c.phi.size());
  auto adam_size = [](const AdamState& s, std::uint64_t n) {
    return static_cast<std::uint64_t>(s.first_moment.size()) == n &&
           static_cast<std::uint64_t>(s.second_moment.size()) == n;
  };
  if (!adam_size(c.theta_adam, n_theta) || (n_psi > 0 && !adam_size(c.psi_adam, n_psi))) {
    throw UsageError("checkpoint optimizer state does not match its parameters");
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError(fmt::format("cannot write checkpoint {}", tmp.string()));
    Writer w(out);
    out.write(kMagic, sizeof(kMagic));
    w.pod(kCheckpointVersion);
    w.u64(n_theta);
    w.u64(n_psi);
    w.u64(n_phi);
    w.string(c.algorithm);
    w.i64(c.update_index);
    w.i64(c.env_steps);
    w.i64(c.updates_since_design);
    w.f64(c.last_design_cost);
    w.vector(c.theta);
    w.vector(c.psi);
    w.vector(c.phi);
    w.vector(c.theta_adam.first_moment);
    w.vector(c.theta_adam.second_moment);
    w.i64(c.theta_adam.step);
    if (n_psi > 0) {
      w.vector(c.psi_adam.first_moment);
      w.vector(c.psi_adam.second_moment);
      w.i64(c.psi_adam.step);
    }
    w.u64(c.return_history.size());
    w.doubles(c.return_history.data(), c.return_history.size());
    w.string(c.rng_state);
    w.string(c.config_text);
    if (!out.flush()) throw ConfigError(fmt::format("failed writing checkpoint {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot read checkpoint {}", path.string()));
  Reader r(in, path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ConfigError(fmt::format("{} is not a checkpoint (bad magic)", path.string()));
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ConfigError(fmt::format("{}: checkpoint format version {} but this build reads version {}", path.string(),
                                  version, kCheckpointVersion));
  }
  Checkpoint c;
  const std::uint64_t n_theta = r.u64();
  const std::uint64_t n_psi = r.u64();
  const std::uint64_t n_phi = r.u64();
  if (n_theta > (1ULL << 32) || n_psi > (1ULL << 32) || n_phi > (1ULL << 20)) {
    throw ConfigError(fmt::format("{}: corrupt dimensions", path.string()));
  }
  c.algorithm = r.string();
  c.update_index = r.i64();
  c.env_steps = r.i64();
  c.updates_since_design = r.i64();
  c.last_design_cost = r.f64();
  c.theta = r.vector(n_theta);
  c.psi = r.vector(n_psi);
  c.phi = r.vector(n_phi);
  c.theta_adam.first_moment = r.vector(n_theta);
  c.theta_adam.second_moment = r.vector(n_theta);
  c.theta_adam.step = r.i64();
  if (n_psi > 0) {
    c.psi_adam.first_moment = r.vector(n_psi);
    c.psi_adam.second_moment = r.vector(n_psi);
    c.psi_adam.step = r.i64();
  }
  const std::uint64_t n_hist = r.u64();
  if (n_hist > (1ULL << 32)) throw ConfigError(fmt::format("{}: corrupt history length", path.string()));
  c.return_history.resize(n_hist);
  const Vector hist = r.vector(n_hist);
  for (std::uint64_t i = 0; i < n_hist; ++i) c.return_history[i] = hist[static_cast<Index>(i)];
  c.rng_state = r.string();
  c.config_text = r.string();
  return c;
}

}  // namespace morph
