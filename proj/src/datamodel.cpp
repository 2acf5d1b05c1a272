// SPDX-License-Identifier: Apache-2.0
#include "weave/datamodel.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

namespace weave {

using nlohmann::json;
namespace fs = std::filesystem;

int InterleavedDocument::image_count() const {
  int n = 0;
  for (const auto& e : elements)
    if (std::holds_alternative<ImageRecord>(e)) ++n;
  return n;
}

void validate_image(const ImageRecord& img) {
  if (img.height <= 0 || img.width <= 0)
    throw std::invalid_argument("image has empty spatial extent");
  if (img.pixels.size() != static_cast<size_t>(img.height) * img.width * 3)
    throw std::invalid_argument("pixel buffer size mismatch");
  for (float v : img.pixels) {
    if (!std::isfinite(v)) throw std::invalid_argument("pixel not finite");
    if (v < 0.0f || v > 1.0f) throw std::invalid_argument("pixel out of range");
  }
  if (img.has_mask()) {
    if (img.mask.size() != static_cast<size_t>(img.height) * img.width)
      throw std::invalid_argument("mask shape mismatch");
    for (float v : img.mask)
      if (v != 0.0f && v != 1.0f)
        throw std::invalid_argument("mask value not binary");
  }
  if (img.similarity_score &&
      (!std::isfinite(*img.similarity_score) || *img.similarity_score < -1.0f ||
       *img.similarity_score > 1.0f))
    throw std::invalid_argument("similarity score out of range");
}

const InterleavedDocument& validate_document(const InterleavedDocument& doc) {
  if (doc.elements.empty())
    throw std::invalid_argument("document has no elements");
  for (const auto& e : doc.elements)
    if (const auto* img = std::get_if<ImageRecord>(&e)) validate_image(*img);
  return doc;
}

void validate_special_tokens(const SpecialTokens& st) {
  std::set<int> ids{st.soi_id, st.img_id, st.eos_id, st.pad_id};
  if (ids.size() != 4)
    throw std::invalid_argument("special token ids must be distinct");
}

// ------------------------------------------------------------------ tensors

void write_tensor_file(const fs::path& path, const std::vector<int>& shape,
                       const std::vector<float>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f.write("WTEN", 4);
  int32_t nd = static_cast<int32_t>(shape.size());
  f.write(reinterpret_cast<const char*>(&nd), 4);
  for (int d : shape) {
    int32_t v = d;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

void read_tensor_file(const fs::path& path, std::vector<int>& shape,
                      std::vector<float>& data) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (std::string(magic, 4) != "WTEN")
    throw std::runtime_error("bad tensor file magic: " + path.string());
  int32_t nd = 0;
  f.read(reinterpret_cast<char*>(&nd), 4);
  shape.resize(nd);
  size_t numel = 1;
  for (int i = 0; i < nd; ++i) {
    int32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    shape[i] = v;
    numel *= static_cast<size_t>(v);
  }
  data.resize(numel);
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(numel * sizeof(float)));
  if (!f) throw std::runtime_error("truncated tensor file: " + path.string());
}

uint64_t fnv1a_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  uint64_t h = 14695981039346656037ull;
  char buf[4096];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!f) break;
  }
  return h;
}

static std::string hash_hex(uint64_t h) {
  std::ostringstream s;
  s << std::hex << h;
  return s.str();
}

// -------------------------------------------------------------- serialization

size_t serialize_docs(const std::vector<InterleavedDocument>& docs,
                      const fs::path& path) {
  const fs::path tensor_dir =
      path.parent_path() / (path.stem().string() + "_tensors");
  bool need_dir = false;
  for (const auto& d : docs)
    if (d.image_count() > 0) need_dir = true;
  if (need_dir) fs::create_directories(tensor_dir);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  size_t written = 0;
  for (const auto& doc : docs) {
    validate_document(doc);
    json elems = json::array();
    int img_idx = 0;
    for (const auto& e : doc.elements) {
      if (const auto* t = std::get_if<TextSpan>(&e)) {
        elems.push_back({{"type", "text"}, {"text", t->text}});
      } else {
        const auto& img = std::get<ImageRecord>(e);
        std::string stem = doc.doc_id + "_" + std::to_string(img_idx++);
        fs::path px = tensor_dir / (stem + ".bin");
        write_tensor_file(px, {img.height, img.width, 3}, img.pixels);
        json rec = {{"type", "image"},
                    {"ref", fs::relative(px, path.parent_path()).generic_string()},
                    {"hash", hash_hex(fnv1a_file(px))}};
        if (img.similarity_score) rec["sim"] = *img.similarity_score;
        if (img.has_mask()) {
          fs::path mk = tensor_dir / (stem + "_mask.bin");
          write_tensor_file(mk, {img.height, img.width}, img.mask);
          rec["mask_ref"] = fs::relative(mk, path.parent_path()).generic_string();
          rec["mask_hash"] = hash_hex(fnv1a_file(mk));
        }
        elems.push_back(std::move(rec));
      }
    }
    out << json{{"doc_id", doc.doc_id}, {"elements", std::move(elems)}}.dump()
        << "\n";
    ++written;
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
  return written;
}

std::vector<InterleavedDocument> deserialize_docs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<InterleavedDocument> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    InterleavedDocument doc;
    doc.doc_id = j.at("doc_id").get<std::string>();
    for (const auto& e : j.at("elements")) {
      const std::string type = e.at("type").get<std::string>();
      if (type == "text") {
        doc.elements.push_back(TextSpan{e.at("text").get<std::string>()});
      } else if (type == "image") {
        ImageRecord img;
        fs::path px = path.parent_path() / e.at("ref").get<std::string>();
        if (hash_hex(fnv1a_file(px)) != e.at("hash").get<std::string>())
          throw std::runtime_error("tensor hash mismatch: " + px.string());
        std::vector<int> shape;
        read_tensor_file(px, shape, img.pixels);
        if (shape.size() != 3 || shape[2] != 3)
          throw std::runtime_error("unexpected pixel tensor shape");
        img.height = shape[0];
        img.width = shape[1];
        if (e.contains("sim")) img.similarity_score = e["sim"].get<float>();
        if (e.contains("mask_ref")) {
          fs::path mk = path.parent_path() / e["mask_ref"].get<std::string>();
          if (hash_hex(fnv1a_file(mk)) != e.at("mask_hash").get<std::string>())
            throw std::runtime_error("mask hash mismatch: " + mk.string());
          std::vector<int> mshape;
          read_tensor_file(mk, mshape, img.mask);
        }
        doc.elements.push_back(std::move(img));
      } else {
        throw std::runtime_error("unknown element type: " + type);
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

void write_ppm(const fs::path& path, const ImageRecord& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, img.pixels[i]));
    f.put(static_cast<char>(std::lround(v * 255.0f)));
  }
}

bool images_equal(const ImageRecord& a, const ImageRecord& b) {
  return a.height == b.height && a.width == b.width && a.pixels == b.pixels &&
         a.mask == b.mask && a.similarity_score == b.similarity_score;
}

bool documents_equal(const InterleavedDocument& a,
                     const InterleavedDocument& b) {
  if (a.doc_id != b.doc_id || a.elements.size() != b.elements.size())
    return false;
  for (size_t i = 0; i < a.elements.size(); ++i) {
    const auto& ea = a.elements[i];
    const auto& eb = b.elements[i];
    if (ea.index() != eb.index()) return false;
    if (const auto* t = std::get_if<TextSpan>(&ea)) {
      if (t->text != std::get<TextSpan>(eb).text) return false;
    } else if (!images_equal(std::get<ImageRecord>(ea),
                             std::get<ImageRecord>(eb))) {
      return false;
    }
  }
  return true;
}

}  // namespace weave
