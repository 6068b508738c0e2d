#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>

#include "charmt/training.hpp"

namespace charmt {

namespace {

constexpr char kMagic[4] = {'C', 'X', 'F', '1'};
constexpr std::string_view kAdamM = "adam.m.";
constexpr std::string_view kAdamV = "adam.v.";

void put_uint(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw std::runtime_error("truncated checkpoint");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

struct Record {
  std::string name;
  Shape shape;
  const std::vector<double>* values;
};

void write_record(std::string& out, const Record& r, StorageType storage) {
  put_uint(out, r.name.size(), 4);
  out += r.name;
  put_uint(out, static_cast<std::uint8_t>(storage), 1);
  put_uint(out, r.shape.size(), 1);
  for (std::size_t d : r.shape) put_uint(out, d, 8);
  for (double v : *r.values) {
    if (storage == StorageType::kFloat64) {
      put_uint(out, std::bit_cast<std::uint64_t>(v), 8);
    } else {
      put_uint(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    }
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab,
                     const OptimizerState* optimizer, int epoch, const nlohmann::json& extra, StorageType storage) {
  std::vector<std::vector<double>> param_values;
  std::vector<Record> records;
  param_values.reserve(model.params().size());
  for (const auto& [name, t] : model.params()) {
    param_values.emplace_back(t.data().begin(), t.data().end());
    records.push_back({name, t.shape(), &param_values.back()});
  }
  if (optimizer) {
    for (const auto& [name, t] : model.params()) {
      if (!optimizer->m.count(name) || !optimizer->v.count(name)) {
        throw std::invalid_argument("optimizer state lacks parameter " + name);
      }
      records.push_back({std::string(kAdamM) + name, t.shape(), &optimizer->m.at(name)});
      records.push_back({std::string(kAdamV) + name, t.shape(), &optimizer->v.at(name)});
    }
  }
  std::sort(records.begin(), records.end(), [](const Record& a, const Record& b) { return a.name < b.name; });

  nlohmann::json header = {{"config", to_json(model.config())},
                           {"vocab", vocab.to_text()},
                           {"step", optimizer ? optimizer->step : 0},
                           {"epoch", epoch},
                           {"records", records.size()},
                           {"extra", extra}};
  if (optimizer) {
    header["optimizer"] = {{"beta1", optimizer->config.beta1},
                           {"beta2", optimizer->config.beta2},
                           {"eps", optimizer->config.eps},
                           {"step", optimizer->step}};
  }
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_uint(out, kCheckpointVersion, 1);
  put_uint(out, header_text.size(), 8);
  out += header_text;
  for (const Record& r : records) write_record(out, r, storage);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  std::string data = buf.str();
  if (data.size() < sizeof kMagic || !std::equal(kMagic, kMagic + sizeof kMagic, data.begin())) {
    throw std::runtime_error("not a checkpoint: " + path.string());
  }
  Reader in(std::move(data));
  in.bytes(sizeof kMagic);
  const auto version = in.uint(1);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path.string() +
                             " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = in.uint(8);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.bytes(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  Checkpoint ck;
  ck.config = model_config_from_json(header.at("config"));
  if (expected && expected->d_model != ck.config.d_model) {
    throw std::runtime_error("checkpoint d_model " + std::to_string(ck.config.d_model) + " does not match expected " +
                             std::to_string(expected->d_model));
  }
  if (expected && !(to_json(*expected) == to_json(ck.config))) {
    throw std::runtime_error("checkpoint model config does not match the expected one");
  }
  ck.vocab = Vocabulary::from_text(header.at("vocab").get<std::string>());
  ck.step = header.at("step").get<std::uint64_t>();
  ck.epoch = header.at("epoch").get<int>();
  ck.extra = header.value("extra", nlohmann::json::object());
  if (header.contains("optimizer")) {
    const auto& o = header.at("optimizer");
    ck.has_optimizer = true;
    ck.optimizer.config = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>()};
    ck.optimizer.step = o.at("step").get<std::uint64_t>();
  }

  const auto count = header.at("records").get<std::size_t>();
  for (std::size_t r = 0; r < count; ++r) {
    const std::string name = in.bytes(in.uint(4));
    const auto dtype = static_cast<StorageType>(in.uint(1));
    if (dtype != StorageType::kFloat64 && dtype != StorageType::kFloat32) {
      throw std::runtime_error("record " + name + " has unknown dtype tag");
    }
    const auto ndim = in.uint(1);
    Shape shape;
    for (std::uint64_t d = 0; d < ndim; ++d) shape.push_back(in.uint(8));
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) {
      v = dtype == StorageType::kFloat64 ? std::bit_cast<double>(in.uint(8))
                                         : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4))));
    }
    if (name.starts_with(kAdamM)) {
      ck.optimizer.m[name.substr(kAdamM.size())] = std::move(values);
    } else if (name.starts_with(kAdamV)) {
      ck.optimizer.v[name.substr(kAdamV.size())] = std::move(values);
    } else {
      ck.params.add(name, Tensor::from_data(shape, std::move(values), true));
    }
  }
  if (!in.done()) throw std::runtime_error("trailing bytes after checkpoint records in " + path.string());
  // Validates names and shapes against the configuration.
  (void)Model(ck.config, ck.params);
  if (static_cast<int>(ck.vocab.size()) != ck.config.vocab_size) {
    throw std::runtime_error("checkpoint vocabulary size does not match its model config");
  }
  return ck;
}

}  // namespace charmt
