#include "caselab/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "caselab/errors.hpp"

namespace caselab {

namespace {

int next_pnm_token(std::istream& in, const std::string& path) {
  // Skips whitespace and '#' comments, then reads one decimal integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c))
    throw IoError("malformed pnm header in " + path);
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  if (c != EOF) in.unget();
  return value;
}

}  // namespace

RawImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw IoError("not a binary pgm/ppm file: " + path);
  RawImage img;
  img.channels = m1 == '5' ? 1 : 3;
  img.width = next_pnm_token(in, path);
  img.height = next_pnm_token(in, path);
  int maxval = next_pnm_token(in, path);
  if (maxval != 255)
    throw IoError("unsupported maxval " + std::to_string(maxval) + " in " + path);
  in.get();  // single whitespace before raster
  if (img.width <= 0 || img.height <= 0)
    throw IoError("bad dimensions in " + path);
  size_t count = size_t(img.width) * size_t(img.height) * size_t(img.channels);
  img.pixels.resize(count);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(count));
  if (static_cast<size_t>(in.gcount()) != count)
    throw IoError("truncated raster data in " + path);
  return img;
}

void write_pnm(const std::string& path, const RawImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("pnm supports 1 or 3 channels, got " +
                  std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("short write to " + path);
}

Tensor image_to_tensor(const RawImage& img, int out_channels,
                       int out_resolution, float mean, float stddev) {
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("image must have 1 or 3 channels");
  if (out_channels != 1 && out_channels != 3)
    throw ShapeError("output must have 1 or 3 channels");
  int res = out_resolution;
  Tensor out = Tensor::zeros({out_channels, res, res});
  float sx = static_cast<float>(img.width) / static_cast<float>(res);
  float sy = static_cast<float>(img.height) / static_cast<float>(res);
  auto sample = [&](int c, float x, float y) {
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    float fx = x - static_cast<float>(x0);
    float fy = y - static_cast<float>(y0);
    auto px = [&](int xi, int yi) {
      xi = std::clamp(xi, 0, img.width - 1);
      yi = std::clamp(yi, 0, img.height - 1);
      size_t at = (size_t(yi) * img.width + size_t(xi)) * img.channels + c;
      return static_cast<float>(img.pixels[at]) / 255.f;
    };
    float top = px(x0, y0) * (1.f - fx) + px(x0 + 1, y0) * fx;
    float bot = px(x0, y0 + 1) * (1.f - fx) + px(x0 + 1, y0 + 1) * fx;
    return top * (1.f - fy) + bot * fy;
  };
  for (int i = 0; i < res; ++i) {
    float y = (static_cast<float>(i) + 0.5f) * sy - 0.5f;
    for (int j = 0; j < res; ++j) {
      float x = (static_cast<float>(j) + 0.5f) * sx - 0.5f;
      for (int oc = 0; oc < out_channels; ++oc) {
        float v;
        if (img.channels == out_channels) {
          v = sample(oc, x, y);
        } else if (img.channels == 1) {
          v = sample(0, x, y);
        } else {
          v = (sample(0, x, y) + sample(1, x, y) + sample(2, x, y)) / 3.f;
        }
        out.data[(size_t(oc) * res + size_t(i)) * res + size_t(j)] =
            (v - mean) / stddev;
      }
    }
  }
  return out;
}

RawImage tensor_to_image(const Tensor& t, float mean, float stddev) {
  if (t.rank() != 3) throw ShapeError("expected [ch, h, w] tensor");
  RawImage img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("pnm supports 1 or 3 channels");
  img.pixels.resize(t.data.size());
  size_t plane = size_t(img.height) * size_t(img.width);
  for (int c = 0; c < img.channels; ++c) {
    for (size_t p = 0; p < plane; ++p) {
      float v = t.data[size_t(c) * plane + p] * stddev + mean;
      float q = std::round(std::clamp(v, 0.f, 1.f) * 255.f);
      img.pixels[p * img.channels + size_t(c)] = static_cast<uint8_t>(q);
    }
  }
  return img;
}

}  // namespace caselab
