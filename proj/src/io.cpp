#include "papp/io.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace papp::io {

namespace {

constexpr char kMagic[8] = {'P', 'A', 'P', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os_.write(b, 8);
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint64_t u64() {
    unsigned char b[8];
    is_.read(reinterpret_cast<char*>(b), 8);
    if (!is_) throw FormatError("checkpoint: unexpected end of file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  int i32() {
    const std::int64_t v = i64();
    if (v < INT32_MIN || v > INT32_MAX) throw FormatError("checkpoint: integer field out of range");
    return static_cast<int>(v);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 20)) throw FormatError("checkpoint: implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) throw FormatError("checkpoint: unexpected end of file");
    return s;
  }

 private:
  std::istream& is_;
};

void write_group(Writer& w, const std::string& prefix, const model::ParamGroup& g) {
  for (const auto& t : g.tensors()) {
    w.str(prefix + "/" + t.name);
    w.u64(static_cast<std::uint64_t>(t.value.rows()));
    w.u64(static_cast<std::uint64_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.rows(); ++i)
      for (Eigen::Index j = 0; j < t.value.cols(); ++j) w.f64(t.value(i, j));
  }
}

void read_group(Reader& r, const std::string& prefix, model::ParamGroup& g) {
  for (auto& t : g.tensors()) {
    const std::string name = r.str();
    if (name != prefix + "/" + t.name)
      throw FormatError("checkpoint: expected tensor '" + prefix + "/" + t.name + "', found '" + name + "'");
    const auto rows = static_cast<Eigen::Index>(r.u64());
    const auto cols = static_cast<Eigen::Index>(r.u64());
    if (rows != t.value.rows() || cols != t.value.cols())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(rows, cols) + ", expected " +
                        shape_str(t.value.rows(), t.value.cols()));
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) t.value(i, j) = r.f64();
    if (!t.value.allFinite()) throw FormatError("checkpoint: tensor '" + name + "' holds non-finite values");
  }
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(path, mode);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream is(path, mode);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return is;
}

}  // namespace

void save_checkpoint(const model::BackboneParams& params, const std::filesystem::path& path) {
  std::ostringstream buf(std::ios::binary);
  Writer w(buf);
  buf.write(kMagic, sizeof kMagic);
  w.u64(kVersion);
  w.i64(params.dims.n_tx);
  w.i64(params.dims.n_users);
  w.i64(params.dims.n_rf);
  w.str(model::to_string(params.mode));
  const auto& f = params.features;
  w.i64(f.embed_len);
  for (int c : f.cnn_channels) w.i64(c);
  w.i64(f.encoder_depth);
  for (double q : f.quantiles) w.f64(q);
  w.i64(f.kernel);
  w.i64(f.student_hidden);
  write_group(w, "pi", params.pi);
  write_group(w, "theta", params.theta);
  write_group(w, "phi", params.phi);

  auto os = open_out(path, std::ios::out | std::ios::binary | std::ios::trunc);
  const std::string bytes = buf.str();
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

model::BackboneParams load_checkpoint(const std::filesystem::path& path) {
  auto is = open_in(path, std::ios::in | std::ios::binary);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, kMagic)) throw FormatError("checkpoint: bad magic in " + path.string());
  Reader r(is);
  if (const auto v = r.u64(); v != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  model::ModelDims dims;
  dims.n_tx = r.i32();
  dims.n_users = r.i32();
  dims.n_rf = r.i32();
  const auto mode = model::parse_mode(r.str());
  model::FeatureConfig f;
  f.embed_len = r.i32();
  for (int& c : f.cnn_channels) c = r.i32();
  f.encoder_depth = r.i32();
  for (double& q : f.quantiles) q = r.f64();
  f.kernel = r.i32();
  f.student_hidden = r.i32();

  // Shapes come from a fresh skeleton; values are overwritten below.
  auto params = model::init_backbone(dims, f, mode, 0);
  read_group(r, "pi", params.pi);
  read_group(r, "theta", params.theta);
  read_group(r, "phi", params.phi);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes in " + path.string());
  return params;
}

std::string encode_matrix_hex(const CMatrix& m) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(static_cast<std::size_t>(m.size()) * 32);
  auto put = [&](double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      const auto byte = static_cast<unsigned>((bits >> (8 * i)) & 0xffu);
      out.push_back(kDigits[byte >> 4]);
      out.push_back(kDigits[byte & 0xfu]);
    }
  };
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      put(m(i, j).real());
      put(m(i, j).imag());
    }
  return out;
}

CMatrix decode_matrix_hex(const std::string& hex, Eigen::Index rows, Eigen::Index cols) {
  if (rows < 0 || cols < 0 || hex.size() != static_cast<std::size_t>(rows * cols) * 32)
    throw FormatError("dataset: hex payload length does not match " + shape_str(rows, cols));
  auto nibble = [](char c) -> unsigned {
    if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<unsigned>(c - 'A' + 10);
    throw FormatError("dataset: invalid hex digit");
  };
  std::size_t pos = 0;
  auto take = [&]() {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i, pos += 2)
      bits |= static_cast<std::uint64_t>(nibble(hex[pos]) << 4 | nibble(hex[pos + 1])) << (8 * i);
    return std::bit_cast<double>(bits);
  };
  CMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double re = take();
      const double im = take();
      m(i, j) = {re, im};
    }
  return m;
}

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  auto os = open_out(path, std::ios::out | std::ios::trunc);
  for (const auto& rec : records) {
    const auto& s = rec.sample;
    nlohmann::ordered_json j;
    j["site"] = s.domain.site_id;
    j["p_tx"] = s.domain.p_tx;
    j["los"] = s.domain.los;
    j["beta"] = s.domain.beta;
    j["rows"] = s.h.rows();
    j["cols"] = s.h.cols();
    j["h"] = encode_matrix_hex(s.h);
    if (rec.h_estimate) {
      require_same_shape(*rec.h_estimate, s.h, "write_dataset");
      j["h_est"] = encode_matrix_hex(*rec.h_estimate);
    }
    if (rec.wmmse_rate) j["wmmse_rate"] = *rec.wmmse_rate;
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DatasetRecord rec;
      auto& s = rec.sample;
      s.domain.site_id = j.at("site").get<std::string>();
      s.domain.p_tx = j.at("p_tx").get<double>();
      s.domain.los = j.at("los").get<bool>();
      s.domain.beta = j.at("beta").get<double>();
      s.h = decode_matrix_hex(j.at("h").get<std::string>(), j.at("rows").get<Eigen::Index>(),
                              j.at("cols").get<Eigen::Index>());
      if (j.contains("h_est"))
        rec.h_estimate = decode_matrix_hex(j["h_est"].get<std::string>(), s.h.rows(), s.h.cols());
      if (j.contains("wmmse_rate")) rec.wmmse_rate = j["wmmse_rate"].get<double>();
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  auto os = open_out(path, std::ios::out | std::ios::trunc);
  for (const auto& [k, v] : manifest) os << k << " = " << v << '\n';
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Manifest read_manifest(const std::filesystem::path& path) {
  auto is = open_in(path);
  Manifest m;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (line.empty() || line[0] == '#') continue;
    if (eq == std::string::npos) throw FormatError("manifest: malformed line '" + line + "'");
    m[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return m;
}

std::string file_hash(const std::filesystem::path& path) {
  auto is = open_in(path, std::ios::in | std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char c;
  while (is.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace papp::io
