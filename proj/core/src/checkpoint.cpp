#include "ssn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ssn/error.hpp"
#include "ssn/trainer.hpp"

namespace ssn {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'N', 'C'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 8;

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_ += s;
  }
  void floats(const std::vector<float>& v) {
    put<std::uint64_t>(v.size());
    for (float f : v) put(f);
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  std::string str(const char* what) {
    const auto n = get<std::uint64_t>(what);
    need(n, what);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<float> floats(const char* what) {
    const auto n = get<std::uint64_t>(what);
    need(n * sizeof(float), what);
    std::vector<float> v(n);
    for (auto& f : v) f = get<float>(what);
    return v;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > in_.size() - pos_) {
      throw FormatError(std::string("checkpoint: truncated while reading ") + what + " at byte " +
                        std::to_string(kHeaderBytes + pos_) + " (need " + std::to_string(n) + " more bytes, " +
                        std::to_string(in_.size() - pos_) + " left)");
    }
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const CheckpointState& s) {
  Writer w;
  w.str(s.metadata);
  w.str(s.graph.to_json());
  w.put<std::int64_t>(s.iteration);
  w.put<std::uint8_t>(s.inserted ? 1 : 0);
  w.str(s.rng_state);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.params.size()));
  for (const auto& b : s.params) {
    w.str(b.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.shape.size()));
    for (int d : b.shape) w.put<std::int32_t>(d);
    w.floats(b.values);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.groups.size()));
  for (const auto& g : s.groups) {
    w.str(g.name);
    w.put<double>(g.lr);
    w.put<std::int64_t>(g.steps);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.moments.size()));
    for (const auto& m : g.moments) {
      w.str(m.param);
      w.floats(m.m);
      w.floats(m.v);
    }
  }
  Writer head;
  for (char c : kMagic) head.put<char>(c);
  head.put<std::uint32_t>(CheckpointState::kVersion);
  head.put<std::uint64_t>(w.bytes().size());
  return head.bytes() + w.bytes();
}

CheckpointState decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kHeaderBytes) {
    throw FormatError("checkpoint: truncated header: expected at least " + std::to_string(kHeaderBytes) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic (not an SSNC file)");
  Reader h(bytes.substr(4, 12));
  const auto version = h.get<std::uint32_t>("version");
  if (version != CheckpointState::kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(CheckpointState::kVersion) + ")");
  }
  const auto payload = h.get<std::uint64_t>("payload length");
  const std::uint64_t expected = kHeaderBytes + payload;
  if (bytes.size() != expected) {
    throw FormatError("checkpoint: length mismatch: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  Reader r(bytes.substr(kHeaderBytes));
  CheckpointState s;
  s.metadata = r.str("metadata");
  s.graph = NetworkGraph::from_json(r.str("graph"));
  s.iteration = r.get<std::int64_t>("iteration");
  s.inserted = r.get<std::uint8_t>("insertion flag") != 0;
  s.rng_state = r.str("rng state");
  const auto np = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < np; ++i) {
    CheckpointState::Blob b;
    b.name = r.str("parameter name");
    const auto nd = r.get<std::uint32_t>("parameter rank");
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      b.shape.push_back(r.get<std::int32_t>("parameter shape"));
      count *= static_cast<std::size_t>(std::max(b.shape.back(), 0));
    }
    b.values = r.floats("parameter values");
    if (b.values.size() != count) {
      throw FormatError("checkpoint: blob '" + b.name + "' has " + std::to_string(b.values.size()) +
                        " values, shape " + shape_str(b.shape) + " needs " + std::to_string(count));
    }
    s.params.push_back(std::move(b));
  }
  const auto ng = r.get<std::uint32_t>("group count");
  for (std::uint32_t i = 0; i < ng; ++i) {
    CheckpointState::Group g;
    g.name = r.str("group name");
    g.lr = r.get<double>("group lr");
    g.steps = r.get<std::int64_t>("group steps");
    const auto nm = r.get<std::uint32_t>("group size");
    for (std::uint32_t k = 0; k < nm; ++k) {
      CheckpointState::Moments m;
      m.param = r.str("moment name");
      m.m = r.floats("first moment");
      m.v = r.floats("second moment");
      g.moments.push_back(std::move(m));
    }
    s.groups.push_back(std::move(g));
  }
  if (!r.done()) {
    throw FormatError("checkpoint: " + std::to_string(payload - r.pos()) + " trailing bytes after payload");
  }
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointState& s) {
  const std::string bytes = encode_checkpoint(s);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

CheckpointState capture_checkpoint(Trainer& t, const std::string& metadata) {
  CheckpointState s;
  s.metadata = metadata;
  s.graph = t.model().graph();
  s.iteration = t.iteration();
  s.inserted = t.inserted();
  std::ostringstream rng;
  rng << t.rng();
  s.rng_state = rng.str();
  for (Param<float>* p : t.model().all_params()) s.params.push_back({p->name, p->shape, p->value});
  for (const auto& g : t.optimizer().groups()) {
    CheckpointState::Group out{g.name, g.lr, g.steps, {}};
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      out.moments.push_back({g.params[i]->name, g.moments[i].m, g.moments[i].v});
    }
    s.groups.push_back(std::move(out));
  }
  return s;
}

void load_model_params(Model<float>& m, const CheckpointState& s) {
  auto params = m.all_params();
  if (params.size() != s.params.size()) {
    throw FormatError("checkpoint: has " + std::to_string(s.params.size()) + " parameter blobs, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& b = s.params[i];
    if (b.name != params[i]->name || b.shape != params[i]->shape) {
      throw FormatError("checkpoint: blob " + std::to_string(i) + " is '" + b.name + "' " + shape_str(b.shape) +
                        ", model expects '" + params[i]->name + "' " + shape_str(params[i]->shape));
    }
    params[i]->value = b.values;
  }
  for (int id : m.graph().fsm_layers()) m.set_fsm_state(id, s.inserted ? FsmState::kActive : FsmState::kBypass);
}

void restore_checkpoint(Trainer& t, const CheckpointState& s) {
  if (!(t.model().graph() == s.graph)) throw FormatError("checkpoint: graph does not match the trainer's network");
  if (t.iteration() != 0 || t.inserted()) throw StateError("checkpoint: restore needs a freshly constructed trainer");
  load_model_params(t.model(), s);
  if (s.inserted) t.restore_inserted();
  auto& groups = t.optimizer().groups();
  if (groups.size() != s.groups.size()) {
    throw FormatError("checkpoint: has " + std::to_string(s.groups.size()) + " optimizer groups, trainer has " +
                      std::to_string(groups.size()));
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& g = groups[gi];
    const auto& src = s.groups[gi];
    if (g.name != src.name || g.params.size() != src.moments.size()) {
      throw FormatError("checkpoint: optimizer group '" + src.name + "' does not match '" + g.name + "'");
    }
    g.lr = src.lr;
    g.steps = src.steps;
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      const auto& m = src.moments[i];
      if (m.param != g.params[i]->name || m.m.size() != g.params[i]->size() || m.v.size() != g.params[i]->size()) {
        throw FormatError("checkpoint: optimizer state for '" + m.param + "' does not match '" +
                          g.params[i]->name + "'");
      }
      g.moments[i].m = m.m;
      g.moments[i].v = m.v;
    }
  }
  std::istringstream rng(s.rng_state);
  rng >> t.rng();
  if (!rng) throw FormatError("checkpoint: unreadable rng state");
  t.set_iteration(s.iteration);
}

}  // namespace ssn
