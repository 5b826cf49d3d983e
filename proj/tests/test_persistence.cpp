#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "codeunlearn/checkpoint.hpp"
#include "codeunlearn/config.hpp"
#include "codeunlearn/error.hpp"

using namespace cu;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 1;
  c.ff_dim = 16;
  c.max_seq_len = 8;
  c.bottleneck_layer = 1;
  c.num_codes = 16;
  c.code_dim = 8;
  c.top_s = 2;
  return c;
}

bool same_bits(Seq2SeqModel& a, Seq2SeqModel& b) {
  auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& x = pa[i].second->data;
    const auto& y = pb[i].second->data;
    if (pa[i].first != pb[i].first || pa[i].second->shape != pb[i].second->shape) return false;
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return a.codebook().deleted == b.codebook().deleted;
}

}  // namespace

TEST_CASE("checkpoint round-trip is bitwise and keeps the deletion mask") {
  Seq2SeqModel m(micro_config(), 5);
  // Awkward values must survive exactly.
  m.codebook().codes.data[0] = -0.0;
  m.codebook().codes.data[1] = 1e-310;
  m.codebook().codes.data[2] = 0.1;
  const int kill[] = {3, 7, 11};
  delete_codes(m.codebook(), kill);

  const auto bytes = serialize_checkpoint(m, R"({"kind":"test","metrics":{"x":1.5}})");
  CHECK(std::memcmp(bytes.data(), "CULB", 4) == 0);
  CHECK(bytes[4] == 1);
  LoadedCheckpoint back = deserialize_checkpoint(bytes);
  CHECK(same_bits(m, back.model));
  CHECK(std::signbit(back.model.codebook().codes.data[0]));
  CHECK(back.model.codebook().deleted_indices() == std::vector<int>{3, 7, 11});
  CHECK(back.manifest.find("\"kind\": \"test\"") != std::string::npos);
  CHECK(back.manifest.find("\"deleted_codes\"") != std::string::npos);
  // Re-serializing is byte-identical.
  CHECK(serialize_checkpoint(back.model, R"({"kind":"test","metrics":{"x":1.5}})") == bytes);
  // Deleted codes stay out of every selection after reload.
  SequenceBatch b = SequenceBatch::from_sequences({{4, 5, 6, 7}}, {{4}});
  EncodeOptions opt;
  opt.trace_width = 13;
  Graph g(false);
  const EncodeOutput enc = back.model.encode(g, b, opt);
  REQUIRE_FALSE(enc.trace.empty());
  for (const auto& set : enc.trace[0])
    for (int k : set) CHECK((k != 3 && k != 7 && k != 11));

  const fs::path p = fs::temp_directory_path() / "codeunlearn_rt.culb";
  save_checkpoint(p.string(), m);
  LoadedCheckpoint f = load_checkpoint(p.string());
  CHECK(same_bits(m, f.model));
  fs::remove(p);
}

TEST_CASE("checkpoint without a bottleneck round-trips") {
  ModelConfig c = micro_config();
  c.use_bottleneck = false;
  Seq2SeqModel m(c, 2);
  LoadedCheckpoint back = deserialize_checkpoint(serialize_checkpoint(m));
  CHECK_FALSE(back.model.config().use_bottleneck);
  auto pa = m.named_parameters(), pb = back.model.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second->data == pb[i].second->data);
}

TEST_CASE("checkpoint rejects corruption and version mismatches") {
  Seq2SeqModel m(micro_config(), 5);
  const auto good = serialize_checkpoint(m);

  auto bad_version = good;
  bad_version[4] = 2;
  try {
    deserialize_checkpoint(bad_version);
    FAIL("expected a version error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version 2") != std::string::npos);
  }
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), FormatError);
  auto truncated = good;
  truncated.resize(good.size() - 9);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(trailing), FormatError);
  auto bad_mask = good;
  bad_mask.back() = 7;
  CHECK_THROWS_AS(deserialize_checkpoint(bad_mask), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.culb"), IoError);
  CHECK_THROWS_AS(serialize_checkpoint(m, "[1,2]"), ContractError);
}

TEST_CASE("model config JSON round-trip") {
  ModelConfig c = micro_config();
  c.dropout = 0.125;
  const ModelConfig d = model_config_from_json(model_config_json(c));
  CHECK(model_config_json(d) == model_config_json(c));
  CHECK_THROWS_AS(model_config_from_json("{}"), FormatError);
}

TEST_CASE("run config defaults, overrides and strictness") {
  const RunConfig d = parse_run_config("");
  CHECK(d.seed == 1);
  CHECK(d.model.d_model == 64);
  CHECK(d.model.num_codes == 512);
  CHECK(d.model.code_dim == 128);
  CHECK(d.model.top_s == 8);
  CHECK(d.corpus.n_sentences == 8000);
  CHECK(d.topics.sprimes == std::vector<std::size_t>{8, 24, 40, 56, 72, 88, 104});
  CHECK(d.unlearn.granularity == Granularity::PerSample);

  const RunConfig c = parse_run_config(
      "seed = 9\n[train]\nepochs = 3\ngrad_clip = 1.5\n[unlearn]\ngranularity = \"position\"\n"
      "[corpus.topic_bands]\nnoun03 = [10, 20]\n",
      {"model.d_model=32", "codebook.code_dim=64", "output_dir=elsewhere"});
  CHECK(c.seed == 9);
  CHECK(c.train.seed == 9);
  CHECK(c.corpus.language.seed == 9);
  CHECK(c.train.epochs == 3);
  CHECK(*c.train.grad_clip == 1.5);
  CHECK(c.model.d_model == 32);
  CHECK(c.output_dir == "elsewhere");
  CHECK(c.unlearn.granularity == Granularity::PerPosition);
  CHECK(c.corpus.language.topic_frequency_targets.at("noun03").hi == 20.0);

  const RunConfig again = parse_run_config(to_toml(c));
  CHECK(to_toml(again) == to_toml(c));
  CHECK(topic_seed(again) == topic_seed(c));

  auto message = [](const std::string& text, std::vector<std::string> ov = {}) {
    try {
      parse_run_config(text, ov);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("[train]\nepochz = 3\n").find("train.epochz") != std::string::npos);
  CHECK(message("bogus = 1\n").find("bogus") != std::string::npos);
  CHECK(message("[model]\nd_model = \"wide\"\n").find("model.d_model") != std::string::npos);
  CHECK(message("[corpus.topic_bands]\nnoun03 = [20, 10]\n").find("corpus.topic_bands.noun03") != std::string::npos);
  CHECK(message("[unlearn]\ngranularity = \"token\"\n").find("unlearn.granularity") != std::string::npos);
  CHECK(message("", {"train.lr=-1"}).find("train.lr") != std::string::npos);
  CHECK(message("", {"nonsense"}).find("key=value") != std::string::npos);
  CHECK(message("[train\n").find("<config>:1") != std::string::npos);
  CHECK(message("[[corpus.classes]]\nname = \"x\"\nsize = 2\ncolour = 1\n").find("corpus.classes[0].colour") !=
        std::string::npos);
  CHECK_THROWS_AS(load_run_config("/nonexistent.toml"), IoError);
}

TEST_CASE("shipped configs parse") {
  for (const char* name : {"acceptance.toml", "micro.toml"}) {
    const fs::path p = fs::path(CODEUNLEARN_SOURCE_DIR) / "configs" / name;
    CAPTURE(p.string());
    CHECK_NOTHROW(load_run_config(p.string()));
  }
}
