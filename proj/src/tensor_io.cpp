#include "effisegnet/tensor_io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "effisegnet/errors.hpp"

namespace effisegnet {
namespace {

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes little endian");

std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "F32";
    case torch::kFloat64:
      return "F64";
    case torch::kInt64:
      return "I64";
    default:
      throw ContractError(std::string("unsupported dtype for serialization: ") +
                          c10::toString(t));
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "F32") return torch::kFloat32;
  if (tag == "F64") return torch::kFloat64;
  if (tag == "I64") return torch::kInt64;
  throw LoadError("unsupported dtype tag '" + tag + "'");
}

std::string to_hex(const unsigned char* digest, unsigned len) {
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("SHA-256 init failed");
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx_.get(), digest.data(), &len);
    return to_hex(digest.data(), len);
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path manifest_path_for(const fs::path& weights) {
  fs::path p = weights;
  p += ".manifest.json";
  return p;
}

nlohmann::json read_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_safetensors(const fs::path& path, const NamedTensors& tensors,
                       const std::map<std::string, std::string>& metadata) {
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::vector<torch::Tensor> packed;
  packed.reserve(tensors.size());
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    torch::Tensor c = t.detach().to(torch::kCPU).contiguous();
    const std::size_t nbytes = c.numel() * c.element_size();
    header[name] = {{"dtype", dtype_tag(c.scalar_type())},
                    {"shape", c.sizes().vec()},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
    packed.push_back(std::move(c));
  }
  std::string head = header.dump();
  // Pad so the data section starts 8-byte aligned.
  while ((8 + head.size()) % 8 != 0) head.push_back(' ');

  std::string blob;
  blob.reserve(8 + head.size() + offset);
  const uint64_t head_len = head.size();
  blob.append(reinterpret_cast<const char*>(&head_len), sizeof head_len);
  blob.append(head);
  for (const auto& c : packed)
    blob.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
  write_file_atomic(path, blob);
}

SafetensorsFile read_safetensors(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw LoadError("cannot open " + path.string());
  const auto file_size = static_cast<uint64_t>(in.tellg());
  in.seekg(0);
  uint64_t head_len = 0;
  if (file_size < sizeof head_len || !in.read(reinterpret_cast<char*>(&head_len), sizeof head_len))
    throw LoadError(path.string() + ": truncated header");
  if (head_len > file_size - sizeof head_len)
    throw LoadError(path.string() + ": header length exceeds file size");
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed header: " + e.what());
  }
  const uint64_t data_start = sizeof head_len + head_len;
  const uint64_t data_size = file_size - data_start;
  std::string data(data_size, '\0');
  in.read(data.data(), static_cast<std::streamsize>(data_size));

  SafetensorsFile out;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) out.metadata[k] = v.get<std::string>();
      continue;
    }
    try {
      const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::array<uint64_t, 2>>();
      if (offsets[0] > offsets[1] || offsets[1] > data_size)
        throw LoadError(path.string() + ": tensor '" + name + "' lies outside the data section (truncated file?)");
      torch::Tensor t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
      if (nbytes != offsets[1] - offsets[0])
        throw LoadError(path.string() + ": tensor '" + name + "' size does not match its shape");
      std::memcpy(t.data_ptr(), data.data() + offsets[0], nbytes);
      out.tensors.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ": bad header entry '" + name + "': " + e.what());
    }
  }
  return out;
}

void write_npy(const fs::path& path, const torch::Tensor& tensor) {
  torch::Tensor c = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  std::string shape_str = "(";
  for (int64_t i = 0; i < c.dim(); ++i) {
    if (i > 0) shape_str += ", ";
    shape_str += std::to_string(c.size(i));
  }
  shape_str += c.dim() == 1 ? ",)" : ")";
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape_str + ", }";
  // magic(6) + version(2) + len(2) + dict + '\n' must be a multiple of 64.
  std::size_t total = 10 + dict.size() + 1;
  dict.append((64 - total % 64) % 64, ' ');
  dict.push_back('\n');

  std::string blob("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<uint16_t>(dict.size());
  blob.append(reinterpret_cast<const char*>(&len), sizeof len);
  blob.append(dict);
  blob.append(static_cast<const char*>(c.data_ptr()), c.numel() * sizeof(float));
  write_file_atomic(path, blob);
}

}  // namespace effisegnet
