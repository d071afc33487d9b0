// Dataset directory format: manifest.json (format_version, image_size,
// channels, classes, per-slice records) plus one raw little-endian f32 .bin
// per image [3,H,W] and per label [4,H,W], row-major. Any dataset written in
// this layout can be read back, so converted external data drops in.
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "advseg/phantom.hpp"

namespace advseg {

constexpr int kDatasetFormatVersion = 1;

namespace detail {

inline std::string slice_stem(int subject_id, int slice_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%04d_t%03d", subject_id, slice_id);
  return buf;
}

inline void write_raw(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  ADVSEG_CHECK(os.good(), FormatError, "dataset: cannot write ", path.string());
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
  ADVSEG_CHECK(os.good(), FormatError, "dataset: write failed for ", path.string());
}

inline Tensor read_raw(const std::filesystem::path& path, const Shape& shape) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  ADVSEG_CHECK(is.good(), FormatError, "dataset: missing file ", path.string());
  const auto bytes = static_cast<std::int64_t>(is.tellg());
  const std::int64_t expect = shape_numel(shape) * static_cast<std::int64_t>(sizeof(float));
  ADVSEG_CHECK(bytes == expect, FormatError, "dataset: ", path.string(), " holds ", bytes,
               " bytes, manifest shape ", shape_str(shape), " needs ", expect);
  is.seekg(0);
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  is.read(reinterpret_cast<char*>(data.data()), expect);
  ADVSEG_CHECK(is.gcount() == expect, FormatError, "dataset: short read on ", path.string());
  return Tensor::from(shape, std::move(data));
}

}  // namespace detail

inline void write_dataset(const std::filesystem::path& dir, const Cohort& cohort) {
  std::filesystem::create_directories(dir);
  nlohmann::json slices = nlohmann::json::array();
  auto dump = [&](const std::vector<PhantomSample>& pool) {
    for (const auto& s : pool) {
      const std::string stem = detail::slice_stem(s.subject_id, s.slice_id);
      detail::write_raw(dir / (stem + "_img.bin"), s.image);
      detail::write_raw(dir / (stem + "_lbl.bin"), s.label);
      slices.push_back({{"subject_id", s.subject_id},
                        {"slice_id", s.slice_id},
                        {"has_lesion", s.has_lesion},
                        {"image_file", stem + "_img.bin"},
                        {"label_file", stem + "_lbl.bin"}});
    }
  };
  dump(cohort.pos_slices);
  dump(cohort.neg_slices);

  nlohmann::json manifest = {{"format_version", kDatasetFormatVersion},
                             {"image_size", cohort.image_size},
                             {"channels", 3},
                             {"classes", 4},
                             {"slices", slices}};
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    ADVSEG_CHECK(os.good(), FormatError, "dataset: cannot write manifest in ", dir.string());
    os << manifest.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

// A subject is positive iff any of its slices carries a lesion.
inline Cohort read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  ADVSEG_CHECK(is.good(), FormatError, "dataset: missing manifest ", manifest_path.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    ADVSEG_THROW(FormatError, "dataset: malformed manifest ", manifest_path.string(), ": ",
                 e.what());
  }
  const int version = manifest.at("format_version").get<int>();
  ADVSEG_CHECK(version == kDatasetFormatVersion, FormatError, "dataset: format_version ", version,
               " unsupported (expected ", kDatasetFormatVersion, ")");
  const int hw = manifest.at("image_size").get<int>();
  ADVSEG_CHECK(manifest.at("channels").get<int>() == 3 && manifest.at("classes").get<int>() == 4,
               FormatError, "dataset: expected 3 channels and 4 classes");

  Cohort cohort;
  cohort.image_size = hw;
  std::map<int, bool> subject_positive;
  std::vector<PhantomSample> all;
  for (const auto& rec : manifest.at("slices")) {
    PhantomSample s;
    s.subject_id = rec.at("subject_id").get<int>();
    s.slice_id = rec.at("slice_id").get<int>();
    s.has_lesion = rec.at("has_lesion").get<bool>();
    s.image = detail::read_raw(dir / rec.at("image_file").get<std::string>(), {3, hw, hw});
    s.label = detail::read_raw(dir / rec.at("label_file").get<std::string>(), {4, hw, hw});
    subject_positive[s.subject_id] = subject_positive[s.subject_id] || s.has_lesion;
    all.push_back(std::move(s));
  }
  for (auto& s : all) {
    auto& pool = subject_positive[s.subject_id] ? cohort.pos_slices : cohort.neg_slices;
    pool.push_back(std::move(s));
  }
  return cohort;
}

}  // namespace advseg
