#include "thinksafe/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "json.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"

namespace thinksafe {

namespace {

using ojson = nlohmann::ordered_json;

constexpr std::string_view kMagic = "THINKSAFE-CKPT 1\n";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

ojson config_to_json(const ModelConfig& c) {
  ojson j;
  j["context_len"] = c.context_len;
  if (c.arch == Architecture::tiny_transformer) {
    j["width"] = c.width;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["ff_width"] = c.ff_width;
  } else {
    j["ngram_n"] = c.ngram_n;
    j["ngram_buckets"] = c.ngram_buckets;
  }
  j["init_std"] = c.init_std;
  return j;
}

ModelConfig config_from_json(Architecture arch, const ojson& j) {
  ModelConfig c;
  c.arch = arch;
  c.context_len = j.at("context_len").get<int>();
  if (arch == Architecture::tiny_transformer) {
    c.width = j.at("width").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ff_width = j.at("ff_width").get<int>();
  } else {
    c.ngram_n = j.at("ngram_n").get<int>();
    c.ngram_buckets = j.at("ngram_buckets").get<int>();
  }
  c.init_std = j.at("init_std").get<double>();
  return c;
}

void append_doubles(std::string& out, std::span<const double> values) {
  const std::size_t at = out.size();
  out.resize(at + values.size() * sizeof(double));
  if (!values.empty()) std::memcpy(out.data() + at, values.data(), values.size() * sizeof(double));
}

std::vector<double> read_doubles(const std::string& bytes, std::size_t& pos, std::size_t count) {
  if (bytes.size() - pos < count * sizeof(double)) throw ParseError("checkpoint is truncated");
  std::vector<double> out(count);
  if (count > 0) std::memcpy(out.data(), bytes.data() + pos, count * sizeof(double));
  pos += count * sizeof(double);
  return out;
}

}  // namespace

std::string serialize_checkpoint(const ToyLM& model) {
  ojson header;
  header["arch"] = to_string(model.config().arch);
  header["config"] = config_to_json(model.config());
  header["seed"] = model.seed();
  header["n_params"] = model.base_params().size();
  if (model.lora_config()) {
    ojson l;
    l["rank"] = model.lora_config()->rank;
    l["alpha"] = model.lora_config()->alpha;
    l["dropout"] = model.lora_config()->dropout;
    l["seed"] = model.lora_seed();
    l["n_params"] = model.lora_params().size();
    header["lora"] = l;
  } else {
    header["lora"] = nullptr;
  }
  std::string out(kMagic);
  out += dump_compact(header);
  out += '\n';
  append_doubles(out, model.base_params());
  append_doubles(out, model.lora_params());
  return out;
}

ToyLM deserialize_checkpoint(const std::string& bytes) {
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) throw ParseError("not a checkpoint file");
  const std::size_t eol = bytes.find('\n', kMagic.size());
  if (eol == std::string::npos) throw ParseError("checkpoint header is truncated");
  try {
    const auto header = ojson::parse(bytes.substr(kMagic.size(), eol - kMagic.size()));
    const Architecture arch = parse_architecture(header.at("arch").get<std::string>());
    const ModelConfig config = config_from_json(arch, header.at("config"));
    const auto seed = header.at("seed").get<std::uint64_t>();
    const auto n_params = header.at("n_params").get<std::size_t>();
    std::size_t pos = eol + 1;
    std::vector<double> params = read_doubles(bytes, pos, n_params);
    std::optional<LoraConfig> lora;
    std::uint64_t lora_seed = 0;
    std::vector<double> lora_params;
    if (const auto& l = header.at("lora"); !l.is_null()) {
      LoraConfig lc;
      lc.rank = l.at("rank").get<int>();
      lc.alpha = l.at("alpha").get<double>();
      lc.dropout = l.at("dropout").get<double>();
      lora = lc;
      lora_seed = l.at("seed").get<std::uint64_t>();
      lora_params = read_doubles(bytes, pos, l.at("n_params").get<std::size_t>());
    }
    if (pos != bytes.size()) throw ParseError("checkpoint has trailing bytes");
    return ToyLM::from_parts(config, seed, std::move(params), lora, lora_seed, std::move(lora_params));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const ToyLM& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(model));
}

ToyLM load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_checkpoint(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace thinksafe
