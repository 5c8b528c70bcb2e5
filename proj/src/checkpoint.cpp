#include "dpkfc/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <iomanip>
#include <locale>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <unistd.h>

namespace dpkfc::io {

namespace {

constexpr const char* kMagic = "dpkfc-checkpoint 1";
constexpr const char* kTensorMagic = "dpkfc-tensor 1";

void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::string line() {
    const auto end = bytes_.find('\n', pos_);
    if (end == std::string::npos) throw std::runtime_error("checkpoint: unexpected end of header at byte " + std::to_string(pos_));
    std::string s = bytes_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return s;
  }

  double f64() {
    if (pos_ + 8 > bytes_.size()) throw std::runtime_error("checkpoint: payload truncated at byte " + std::to_string(pos_));
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  void fill(std::span<double> out) {
    for (double& v : out) v = f64();
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::istringstream expect(Reader& r, const std::string& key) {
  const std::string l = r.line();
  std::istringstream in(l);
  std::string k;
  in >> k;
  if (k != key) throw std::runtime_error("checkpoint: expected '" + key + "' line, found '" + l + "'");
  return in;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  const auto& m = c.model;
  std::ostringstream h;
  h << kMagic << "\n";
  h << "input " << m.input_shape().channels << " " << m.input_shape().height << " " << m.input_shape().width << "\n";
  h << "layers " << m.layers().size() << "\n";
  for (const auto& l : m.layers()) h << nn::describe(l) << "\n";
  h << "normalization " << c.normalization << "\n";
  if (c.kfac) {
    h << "kfac " << c.kfac->layers.size() << " " << c.kfac->creation_step << " " << c.kfac->source << "\n";
    for (const auto& l : c.kfac->layers)
      h << "kfac_layer " << l.layer_id << " " << (l.identity ? 1 : 0) << " " << l.u_a.rows() << " " << l.u_g.rows() << "\n";
  } else {
    h << "kfac 0\n";
  }
  h << "payload\n";
  std::string out = h.str();
  for (const auto& p : m.params())
    for (double v : p.values()) put_f64(out, v);
  if (c.kfac)
    for (const auto& l : c.kfac->layers) {
      for (double v : l.u_a.values()) put_f64(out, v);
      for (double v : l.u_g.values()) put_f64(out, v);
      for (double v : l.eig_a) put_f64(out, v);
      for (double v : l.eig_g) put_f64(out, v);
    }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.line() != kMagic) throw std::runtime_error("checkpoint: bad magic line");
  nn::Shape in;
  if (!(expect(r, "input") >> in.channels >> in.height >> in.width)) throw std::runtime_error("checkpoint: bad input line");
  std::size_t nl = 0;
  if (!(expect(r, "layers") >> nl)) throw std::runtime_error("checkpoint: bad layers line");
  std::vector<nn::LayerSpec> layers;
  for (std::size_t i = 0; i < nl; ++i) layers.push_back(nn::parse_layer(r.line()));
  Checkpoint c;
  c.model = nn::Model(in, layers);
  {
    auto s = expect(r, "normalization");
    std::getline(s >> std::ws, c.normalization);
  }
  std::size_t nk = 0;
  auto ks = expect(r, "kfac");
  ks >> nk;
  struct Dims {
    std::size_t id, a, g;
    bool identity;
  };
  std::vector<Dims> dims;
  if (nk > 0) {
    kfac::KfacState st;
    ks >> st.creation_step;
    std::getline(ks >> std::ws, st.source);
    for (std::size_t i = 0; i < nk; ++i) {
      Dims d{};
      int ident = 0;
      if (!(expect(r, "kfac_layer") >> d.id >> ident >> d.a >> d.g)) throw std::runtime_error("checkpoint: bad kfac_layer line");
      d.identity = ident != 0;
      dims.push_back(d);
    }
    c.kfac = std::move(st);
  }
  if (r.line() != "payload") throw std::runtime_error("checkpoint: missing payload marker");
  for (auto& p : c.model.params()) r.fill(p.values());
  if (c.kfac)
    for (const auto& d : dims) {
      kfac::KfacLayerState l;
      l.layer_id = d.id;
      l.identity = d.identity;
      l.u_a = Matrix(d.a, d.a);
      l.u_g = Matrix(d.g, d.g);
      l.eig_a.resize(d.a);
      l.eig_g.resize(d.g);
      r.fill(l.u_a.values());
      r.fill(l.u_g.values());
      r.fill(l.eig_a);
      r.fill(l.eig_g);
      c.kfac->layers.push_back(std::move(l));
    }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes after payload at byte " + std::to_string(r.pos()));
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { write_atomic(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string encode_tensor(const Matrix& m, const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  if (n != m.size()) throw ContractError("encode_tensor: shape does not match the data size");
  std::ostringstream h;
  h << kTensorMagic << "\nshape";
  for (auto d : shape) h << " " << d;
  h << "\n";
  std::string out = h.str();
  for (double v : m.values()) put_f64(out, v);
  return out;
}

std::pair<Matrix, std::vector<std::size_t>> decode_tensor(const std::string& bytes) {
  Reader r(bytes);
  if (r.line() != kTensorMagic) throw std::runtime_error("tensor: bad magic line");
  auto s = expect(r, "shape");
  std::vector<std::size_t> shape;
  std::size_t d = 0;
  while (s >> d) shape.push_back(d);
  if (shape.empty()) throw std::runtime_error("tensor: empty shape");
  std::size_t n = 1;
  for (auto x : shape) n *= x;
  const std::size_t rows = shape.front();
  Matrix m(rows, rows == 0 ? 0 : n / rows);
  r.fill(m.values());
  if (!r.done()) throw std::runtime_error("tensor: trailing bytes at byte " + std::to_string(r.pos()));
  return {std::move(m), std::move(shape)};
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(17) << v;
  return os.str();
}

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace dpkfc::io
