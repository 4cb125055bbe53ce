#include "cvthead/numerics/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cvthead/errors.hpp"

static_assert(std::endian::native == std::endian::little, "CVTH I/O assumes a little-endian host");

namespace cvthead::numerics {

namespace {

constexpr char kMagic[4] = {'C', 'V', 'T', 'H'};

template <typename U>
void append(std::vector<std::uint8_t>& out, U value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U read(const std::string& context) {
    need(sizeof(U), context);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  void read_into(void* dst, std::size_t n, const std::string& context) {
    need(n, context);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& context) const {
    if (bytes_.size() - pos_ < n) throw FormatError("CVTH: truncated data in " + context);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Container::put(const std::string& name, std::vector<std::uint32_t> dims, std::vector<float> values) {
  if (name.empty() || name.size() > 0xFFFF) throw FormatError("CVTH: invalid entry name length");
  if (dims.size() > 0xFF) throw FormatError("CVTH: too many dims for entry '" + name + "'");
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  if (n != values.size()) {
    throw ShapeError("CVTH entry '" + name + "': dims hold " + std::to_string(n) + " values, got " +
                     std::to_string(values.size()));
  }
  if (!index_.count(name)) order_.push_back(name);
  index_[name] = Entry{std::move(dims), std::move(values)};
}

void Container::put(const std::string& name, const Tensor<float>& tensor) {
  std::vector<std::uint32_t> dims(tensor.shape().begin(), tensor.shape().end());
  put(name, std::move(dims), tensor.to_vector());
}

const Container::Entry& Container::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("CVTH: missing entry '" + name + "'");
  return it->second;
}

Tensor<float> Container::tensor(const std::string& name) const {
  const Entry& e = get(name);
  return Tensor<float>(Shape(e.dims.begin(), e.dims.end()), e.values);
}

std::vector<std::uint8_t> Container::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  append<std::uint32_t>(out, kVersion);
  append<std::uint32_t>(out, static_cast<std::uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const Entry& e = index_.at(name);
    append<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append<std::uint8_t>(out, 0);
    append<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) append<std::uint32_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(e.values.data());
    out.insert(out.end(), p, p + e.values.size() * sizeof(float));
  }
  return out;
}

Container Container::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.read_into(magic, 4, "header");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("CVTH: bad magic");
  const auto version = r.read<std::uint32_t>("header");
  if (version != kVersion) throw FormatError("CVTH: unsupported version " + std::to_string(version));
  const auto count = r.read<std::uint32_t>("header");

  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "entry #" + std::to_string(i);
    const auto len = r.read<std::uint16_t>(where);
    std::string name(len, '\0');
    r.read_into(name.data(), len, where);
    const std::string ctx = "entry '" + name + "'";
    const auto dtype = r.read<std::uint8_t>(ctx);
    if (dtype != 0) throw FormatError("CVTH: unsupported dtype " + std::to_string(dtype) + " in " + ctx);
    const auto ndim = r.read<std::uint8_t>(ctx);
    std::vector<std::uint32_t> dims(ndim);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.read<std::uint32_t>(ctx);
      n *= d;
    }
    std::vector<float> values(n);
    r.read_into(values.data(), n * sizeof(float), ctx);
    if (c.has(name)) throw FormatError("CVTH: duplicate " + ctx);
    c.put(name, std::move(dims), std::move(values));
  }
  if (!r.done()) throw FormatError("CVTH: trailing bytes after last entry");
  return c;
}

void Container::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace cvthead::numerics
