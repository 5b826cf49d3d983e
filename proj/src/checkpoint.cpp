#include "codeunlearn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "codeunlearn/error.hpp"

namespace cu {

namespace {

using json = nlohmann::json;

enum : std::uint8_t { kF64 = 0, kU8 = 1 };

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
  void put_f64(double x) { put(std::bit_cast<std::uint64_t>(x)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(v);
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (n > buf.size() - pos) throw FormatError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

struct SectionHeader {
  std::string name;
  std::uint8_t dtype = kF64;
  std::vector<std::uint64_t> dims;
  std::uint64_t bytes = 0;
};

}  // namespace

std::string model_config_json(const ModelConfig& c) {
  json j = {{"vocab_size", c.vocab_size},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"n_encoder_layers", c.n_encoder_layers},
            {"n_decoder_layers", c.n_decoder_layers},
            {"ff_dim", c.ff_dim},
            {"max_seq_len", c.max_seq_len},
            {"bottleneck_layer", c.bottleneck_layer},
            {"dropout", c.dropout},
            {"use_bottleneck", c.use_bottleneck},
            {"num_codes", c.num_codes},
            {"code_dim", c.code_dim},
            {"top_s", c.top_s}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_encoder_layers = j.at("n_encoder_layers").get<std::size_t>();
    c.n_decoder_layers = j.at("n_decoder_layers").get<std::size_t>();
    c.ff_dim = j.at("ff_dim").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.bottleneck_layer = j.at("bottleneck_layer").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.use_bottleneck = j.at("use_bottleneck").get<bool>();
    c.num_codes = j.at("num_codes").get<std::size_t>();
    c.code_dim = j.at("code_dim").get<std::size_t>();
    c.top_s = j.at("top_s").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint model_config: ") + e.what());
  }
  return c;
}

std::vector<std::uint8_t> serialize_checkpoint(Seq2SeqModel& model, const std::string& manifest_extra) {
  json manifest = json::object();
  if (!manifest_extra.empty()) {
    manifest = json::parse(manifest_extra, nullptr, false);
    if (!manifest.is_object()) throw ContractError("checkpoint manifest_extra must be a JSON object");
  }
  manifest["format"] = "CULB";
  manifest["version"] = kCheckpointVersion;
  manifest["model_config"] = json::parse(model_config_json(model.config()));
  const auto params = model.named_parameters();
  const bool has_mask = model.config().use_bottleneck;
  manifest["deleted_codes"] = has_mask ? model.codebook().deleted_indices() : std::vector<int>{};
  const std::string mtext = manifest.dump(2);

  Writer w;
  w.bytes("CULB", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + (has_mask ? 1 : 0)));
  w.put<std::uint64_t>(mtext.size());
  auto header = [&](const std::string& name, std::uint8_t dtype, const Shape& shape, std::uint64_t bytes) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(dtype);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(bytes);
  };
  for (const auto& [name, t] : params) header(name, kF64, t->shape, t->numel() * 8);
  if (has_mask) header("codebook.deleted", kU8, Shape{model.codebook().deleted.size()}, model.codebook().deleted.size());
  w.bytes(mtext.data(), mtext.size());
  for (const auto& [name, t] : params)
    for (double x : t->data) w.put_f64(x);
  if (has_mask) w.bytes(model.codebook().deleted.data(), model.codebook().deleted.size());
  return std::move(w.out);
}

void save_checkpoint(const std::string& path, Seq2SeqModel& model, const std::string& manifest_extra) {
  const auto bytes = serialize_checkpoint(model, manifest_extra);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing checkpoint " + path);
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != "CULB") throw FormatError("not a CULB checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>();
  const auto mbytes = r.get<std::uint64_t>();
  std::vector<SectionHeader> sections(count);
  for (auto& s : sections) {
    s.name = r.str(r.get<std::uint16_t>());
    s.dtype = r.get<std::uint8_t>();
    s.dims.resize(r.get<std::uint8_t>());
    for (auto& d : s.dims) d = r.get<std::uint64_t>();
    s.bytes = r.get<std::uint64_t>();
  }
  LoadedCheckpoint out;
  out.manifest = r.str(mbytes);
  json manifest = json::parse(out.manifest, nullptr, false);
  if (!manifest.is_object() || !manifest.contains("model_config")) throw FormatError("checkpoint manifest invalid");
  out.model = Seq2SeqModel(model_config_from_json(manifest["model_config"].dump()), 0);

  auto params = out.model.named_parameters();
  const bool has_mask = out.model.config().use_bottleneck;
  if (sections.size() != params.size() + (has_mask ? 1 : 0)) {
    throw FormatError("checkpoint has " + std::to_string(sections.size()) + " sections, model expects " +
                      std::to_string(params.size() + (has_mask ? 1 : 0)));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = sections[i];
    Tensor& t = *params[i].second;
    if (s.name != params[i].first || s.dtype != kF64) throw FormatError("unexpected checkpoint section " + s.name);
    if (s.dims.size() != t.shape.size() || !std::equal(s.dims.begin(), s.dims.end(), t.shape.begin()) ||
        s.bytes != t.numel() * 8) {
      throw FormatError("shape mismatch in checkpoint section " + s.name);
    }
    for (double& x : t.data) x = r.get_f64();
  }
  if (has_mask) {
    const auto& s = sections.back();
    auto& mask = out.model.codebook().deleted;
    if (s.name != "codebook.deleted" || s.dtype != kU8 || s.bytes != mask.size()) {
      throw FormatError("checkpoint deletion mask missing or malformed");
    }
    for (auto& m : mask) {
      m = r.get<std::uint8_t>();
      if (m > 1) throw FormatError("checkpoint deletion mask holds a value other than 0/1");
    }
    if (out.model.codebook().live_count() < out.model.config().top_s) {
      throw FormatError("checkpoint deletion mask leaves fewer than S live codes");
    }
  }
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint payload");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace cu
