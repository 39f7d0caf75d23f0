#include "gaternet/checkpoint.hpp"

#include <sstream>

#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"

namespace gaternet {

namespace {

constexpr std::string_view kMagic = "GNCKPT01";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

std::string encode_meta(const CheckpointMeta& m) {
  std::ostringstream out;
  out << "phase=" << m.phase << '\n'
      << "epoch=" << m.epoch << '\n'
      << "step=" << m.step << '\n'
      << "spec_hash=" << hex64(m.spec_hash) << '\n'
      << "config_hash=" << hex64(m.config_hash) << '\n'
      << "rng_state=" << m.rng_state << '\n';
  return out.str();
}

CheckpointMeta decode_meta(const std::string& text, const std::string& source) {
  CheckpointMeta m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(source + ": malformed metadata line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "phase") m.phase = value;
      else if (key == "epoch") m.epoch = std::stoull(value);
      else if (key == "step") m.step = std::stoull(value);
      else if (key == "spec_hash") m.spec_hash = std::stoull(value, nullptr, 16);
      else if (key == "config_hash") m.config_hash = std::stoull(value, nullptr, 16);
      else if (key == "rng_state") m.rng_state = value;
      else throw FormatError(source + ": unknown metadata key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError(source + ": bad value for metadata key '" + key + "'");
    }
  }
  return m;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void Checkpoint::put(std::string name, const Tensor& tensor) {
  put(std::move(name), tensor.shape(), std::vector<float>(tensor.data().begin(), tensor.data().end()));
}

void Checkpoint::put(std::string name, Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != data.size()) throw ShapeError("checkpoint tensor " + name + ": size mismatch");
  for (auto& t : tensors) {
    if (t.name == name) {
      t.shape = std::move(shape);
      t.data = std::move(data);
      return;
    }
  }
  tensors.push_back({std::move(name), std::move(shape), std::move(data)});
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kVersion);
  w.str(encode_meta(ckpt.meta));
  w.u64(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u8(kDtypeF32);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    for (float v : t.data) w.f32(v);
  }
  const std::uint64_t sum = fnv1a64(w.data());
  w.u64(sum);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  if (bytes.size() < kMagic.size() + 8) throw CheckpointError(source + ": too short to be a checkpoint");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  ByteReader tail(bytes.substr(bytes.size() - 8), source);
  if (tail.u64() != fnv1a64(body)) {
    throw CheckpointError(source + ": checksum mismatch (truncated or corrupted checkpoint)");
  }

  ByteReader r(body, source);
  if (r.bytes(kMagic.size()) != kMagic) throw CheckpointError(source + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.meta = decode_meta(r.str(), source);
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF32) {
      throw CheckpointError(source + ": tensor " + t.name + " has unsupported dtype " + std::to_string(dtype));
    }
    const std::uint32_t rank = r.u32();
    t.shape.resize(rank);
    for (auto& d : t.shape) d = static_cast<std::size_t>(r.u64());
    const std::size_t n = shape_numel(t.shape);
    if (n > r.remaining() / 4) throw FormatError(source + ": tensor " + t.name + " payload truncated");
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CheckpointError(source + ": trailing bytes after tensor table");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  atomic_write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path), path.string());
}

void check_spec_hash(const Checkpoint& ckpt, const ModelSpec& spec, const std::string& source) {
  const std::uint64_t expected = spec.hash();
  if (ckpt.meta.spec_hash != expected) {
    throw CheckpointError(source + ": model spec hash mismatch (checkpoint " + hex64(ckpt.meta.spec_hash) +
                          ", config " + hex64(expected) + ")");
  }
}

void store_model(const GaterNet<float>& model, Checkpoint& ckpt) {
  for (const auto& p : model.parameters()) ckpt.put(p.name, p.tensor);
  for (const auto& b : model.buffers()) ckpt.put(b.name, b.tensor);
}

void restore_model(const Checkpoint& ckpt, GaterNet<float>& model,
                   const std::function<bool(const std::string&)>& select) {
  auto load = [&](const std::vector<NamedTensor<float>>& list) {
    for (const auto& p : list) {
      if (select && !select(p.name)) continue;
      const CheckpointTensor* t = ckpt.find(p.name);
      if (!t) throw CheckpointError("checkpoint has no tensor named " + p.name);
      if (t->shape != p.tensor.shape()) {
        throw CheckpointError("checkpoint tensor " + p.name + " has shape " + shape_str(t->shape) +
                              ", model expects " + shape_str(p.tensor.shape()));
      }
      std::copy(t->data.begin(), t->data.end(), p.tensor.mutable_data().begin());
    }
  };
  load(model.parameters());
  load(model.buffers());
}

}  // namespace gaternet
