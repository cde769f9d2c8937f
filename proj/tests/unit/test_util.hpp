#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "amr/annotations.hpp"

namespace amr::test {

// A legible 5-digit sample on a 640x480 image with its counter at (100,200)
// and 30x40 digit cells.
inline MeterSample legible_sample(const std::string& name = "a.png", const std::string& reading = "04241") {
  MeterSample s;
  s.image_ref = name;
  s.width = 640;
  s.height = 480;
  s.reading = reading;
  const double x0 = 100.0, y0 = 200.0, cell = 30.0;
  const double w = cell * static_cast<double>(reading.size());
  s.counter_quad = Quad{{Point{x0, y0}, Point{x0 + w, y0}, Point{x0 + w, y0 + 40.0}, Point{x0, y0 + 40.0}}};
  for (std::size_t i = 0; i < reading.size(); ++i) {
    s.digits.push_back({BBox{x0 + cell * static_cast<double>(i) + 3.0, y0 + 4.0, 24.0, 32.0}, reading[i] - '0'});
  }
  return s;
}

inline MeterSample illegible_sample(const std::string& name = "b.png") {
  MeterSample s;
  s.image_ref = name;
  s.width = 640;
  s.height = 480;
  s.legibility = Legibility::illegible_faulty;
  s.counter_quad = Quad{{Point{50, 60}, Point{200, 62}, Point{199, 110}, Point{51, 108}}};
  return s;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("amr_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace amr::test
