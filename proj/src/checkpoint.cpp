#include "gml/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gml/error.hpp"

namespace gml {

namespace {

constexpr char kMagic[4] = {'G', 'M', 'L', 'C'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void text(const std::string& s) {
    u32(length(s.size()));
    bytes(s.data(), s.size());
  }
  static std::uint32_t length(std::size_t n) {
    if (n > 0xffffffffu) throw ValidationError("checkpoint: field too large");
    return static_cast<std::uint32_t>(n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) throw ValidationError(std::string("checkpoint truncated reading ") + what);
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8(const char* what) { return *take(1, what); }
  std::uint32_t u32(const char* what) {
    const auto* p = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::uint64_t u64(const char* what) {
    const auto* p = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string text(const char* what) {
    const std::uint32_t n = u32(what);
    const auto* p = take(n, what);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const ArrayRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.config_hash);
  w.u32(Writer::length(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    std::size_t n = 1;
    for (auto d : a.dims) n *= d;
    if (n != a.values.size()) throw ValidationError("checkpoint: array '" + a.name + "' payload does not match its dims");
    w.text(a.name);
    w.u32(Writer::length(a.dims.size()));
    for (auto d : a.dims) w.u32(d);
    for (float v : a.values) w.f32(v);
  }
  w.u8(ckpt.queues ? 1 : 0);
  if (ckpt.queues) {
    const auto& q = *ckpt.queues;
    w.u32(Writer::length(q.capacities.size()));
    w.u32(q.feature_dim);
    for (std::size_t c = 0; c < q.capacities.size(); ++c) {
      w.u32(q.capacities[c]);
      w.u32(Writer::length(q.entries[c].size()));
      for (const auto& e : q.entries[c]) {
        if (e.feature.size() != q.feature_dim) throw ValidationError("checkpoint: queue entry width mismatch");
        for (float v : e.feature) w.f32(v);
        w.u64(e.sample_id);
      }
    }
  }
  w.text(ckpt.rng_state);
  w.text(ckpt.meta);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw ValidationError("not a checkpoint: bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_hash = r.u64("config hash");
  const std::uint32_t count = r.u32("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ArrayRecord a;
    a.name = r.text("array name");
    const std::uint32_t rank = r.u32("rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      a.dims.push_back(r.u32("dims"));
      n *= a.dims.back();
    }
    if (n > r.remaining() / 4) throw ValidationError("checkpoint truncated reading array '" + a.name + "'");
    a.values.resize(n);
    for (auto& v : a.values) v = r.f32("payload");
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.u8("queue flag")) {
    QueueState q;
    const std::uint32_t classes = r.u32("queue classes");
    q.feature_dim = r.u32("queue feature dim");
    for (std::uint32_t c = 0; c < classes; ++c) {
      q.capacities.push_back(r.u32("queue capacity"));
      const std::uint32_t fill = r.u32("queue fill");
      if (fill > q.capacities.back()) throw ValidationError("checkpoint: queue fill exceeds capacity");
      std::vector<QueueEntry> entries(fill);
      for (auto& e : entries) {
        e.feature.resize(q.feature_dim);
        for (auto& v : e.feature) v = r.f32("queue feature");
        e.sample_id = r.u64("queue sample id");
      }
      q.entries.push_back(std::move(entries));
    }
    ckpt.queues = std::move(q);
  }
  ckpt.rng_state = r.text("rng state");
  ckpt.meta = r.text("metadata");
  if (!r.done()) throw ValidationError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::uint64_t parse_hash(const std::string& hex) {
  if (hex.empty() || hex.size() > 16 || hex.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw ValidationError("malformed config hash '" + hex + "'");
  }
  return std::stoull(hex, nullptr, 16);
}

void store_arrays(Checkpoint& ckpt, const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  for (const auto& [name, t] : tensors) {
    ArrayRecord a;
    a.name = prefix + name;
    for (auto d : t.shape()) a.dims.push_back(Writer::length(d));
    a.values.reserve(t.numel());
    for (double v : t.data()) a.values.push_back(static_cast<float>(v));
    ckpt.arrays.push_back(std::move(a));
  }
}

void restore_arrays(const Checkpoint& ckpt, const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  for (const auto& [name, t] : tensors) {
    const ArrayRecord* a = ckpt.find(prefix + name);
    if (!a) throw ValidationError("checkpoint is missing array '" + prefix + name + "'");
    Shape stored(a->dims.begin(), a->dims.end());
    if (stored != t.shape()) {
      throw ValidationError("array '" + prefix + name + "': shape mismatch " + shape_str(stored) + " vs " +
                            shape_str(t.shape()));
    }
    Tensor target = t;
    auto dst = target.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(a->values[i]);
  }
}

QueueState capture_queues(const ClassQueueSet& queues) {
  QueueState q;
  q.feature_dim = Writer::length(queues.feature_dim());
  for (std::size_t c = 0; c < queues.num_classes(); ++c) {
    q.capacities.push_back(Writer::length(queues.capacity(c)));
    q.entries.push_back(queues.snapshot(c));
  }
  return q;
}

ClassQueueSet rebuild_queues(const QueueState& state) {
  QueuePlan plan;
  for (auto c : state.capacities) {
    plan.capacities.push_back(c);
    plan.total += c;
  }
  ClassQueueSet queues(plan, state.feature_dim);
  std::vector<double> wide(state.feature_dim);
  for (std::size_t c = 0; c < state.entries.size(); ++c) {
    for (const auto& e : state.entries[c]) {
      for (std::size_t d = 0; d < wide.size(); ++d) wide[d] = e.feature[d];
      queues.push(c, wide, e.sample_id);
    }
  }
  return queues;
}

}  // namespace gml
