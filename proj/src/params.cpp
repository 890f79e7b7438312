#include "escm/params.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace escm {

ParamRef ParameterStore::add(const std::string& name, int rows, int cols) {
  if (index_.count(name))
    throw Error("ParameterStore: duplicate parameter " + name);
  auto e = std::make_unique<ParamEntry>();
  e->name = name;
  e->value = Mat::Zero(rows, cols);
  e->grad = Mat::Zero(rows, cols);
  e->adam_m = Mat::Zero(rows, cols);
  e->adam_v = Mat::Zero(rows, cols);
  ParamRef ref = e.get();
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
  return ref;
}

ParamRef ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw Error("ParameterStore: unknown parameter " + name);
  return entries_[it->second].get();
}

const ParamEntry* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : entries_[it->second].get();
}

bool ParameterStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e->grad.setZero();
}

std::vector<ParamRef> ParameterStore::entries() {
  std::vector<ParamRef> out;
  out.reserve(entries_.size());
  for (auto& e : entries_) out.push_back(e.get());
  return out;
}

std::vector<const ParamEntry*> ParameterStore::entries() const {
  std::vector<const ParamEntry*> out;
  out.reserve(entries_.size());
  for (auto& e : entries_) out.push_back(e.get());
  return out;
}

long long ParameterStore::total_size() const {
  long long n = 0;
  for (auto& e : entries_) n += e->value.size();
  return n;
}

void AdamOptimizer::step(ParameterStore& params) {
  auto refs = params.entries();
  if (grad_clip > 0.0) {
    double sq = 0.0;
    for (ParamRef p : refs) sq += p->grad.squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > grad_clip) {
      double s = grad_clip / norm;
      for (ParamRef p : refs) p->grad *= s;
    }
  }
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (ParamRef p : refs) {
    p->adam_m = beta1 * p->adam_m + (1.0 - beta1) * p->grad;
    p->adam_v =
        beta2 * p->adam_v.array() + (1.0 - beta2) * p->grad.array().square();
    Mat mhat = p->adam_m / bc1;
    Mat vhat = p->adam_v / bc2;
    p->value.array() -=
        learning_rate * mhat.array() / (vhat.array().sqrt() + eps);
  }
}

namespace {

constexpr char kMagic[8] = {'E', 'S', 'C', 'M', 'C', 'K', 'P', 'T'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

std::string read_str(std::istream& is) {
  std::uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("checkpoint: truncated file");
  return s;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(strings.size()));
  for (const auto& [name, s] : strings) {
    write_str(os, name);
    write_str(os, s);
  }
  write_u32(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, m] : arrays) {
    write_str(os, name);
    write_u64(os, static_cast<std::uint64_t>(m.rows()));
    write_u64(os, static_cast<std::uint64_t>(m.cols()));
    // Stored row-major; MatrixXd is column-major, so stage each row.
    Eigen::RowVectorXd row(m.cols());
    for (int i = 0; i < m.rows(); ++i) {
      row = m.row(i);
      os.write(reinterpret_cast<const char*>(row.data()),
               static_cast<std::streamsize>(sizeof(double)) * m.cols());
    }
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError("checkpoint: bad magic in " + path);
  std::uint32_t version = read_u32(is);
  if (version != kFormatVersion)
    throw ParseError("checkpoint: unsupported format version " +
                     std::to_string(version));
  Checkpoint ck;
  std::uint32_t ns = read_u32(is);
  for (std::uint32_t k = 0; k < ns; ++k) {
    std::string name = read_str(is);
    ck.strings[name] = read_str(is);
  }
  std::uint32_t na = read_u32(is);
  for (std::uint32_t k = 0; k < na; ++k) {
    std::string name = read_str(is);
    std::uint64_t rows = read_u64(is);
    std::uint64_t cols = read_u64(is);
    Mat m(static_cast<int>(rows), static_cast<int>(cols));
    Eigen::RowVectorXd row(static_cast<int>(cols));
    for (std::uint64_t i = 0; i < rows; ++i) {
      is.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(sizeof(double) * cols));
      if (!is) throw IoError("checkpoint: truncated array " + name);
      m.row(static_cast<int>(i)) = row;
    }
    ck.arrays[name] = std::move(m);
  }
  return ck;
}

std::string git_blob_sha1(const std::string& content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob += content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(),
                 nullptr) != 1)
    throw Error("git_blob_sha1: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace escm
