#include "afa/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <sstream>

#include <png.h>

namespace afa {
namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

Image from_interleaved(const unsigned char* data, int w, int h, int channels_in) {
  Image img;
  img.shape = {3, h, w};
  img.pixels.resize(static_cast<std::size_t>(3) * w * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src_c = channels_in == 1 ? 0 : c;
        img.pixels[(static_cast<std::size_t>(c) * h + y) * w + x] =
            data[(static_cast<std::size_t>(y) * w + x) * channels_in + src_c] / 255.0;
      }
    }
  }
  return img;
}

std::vector<unsigned char> to_interleaved(const Image& img) {
  const int c = img.shape.channels, h = img.shape.height, w = img.shape.width;
  std::vector<unsigned char> out(static_cast<std::size_t>(c) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double v = img.pixels[(static_cast<std::size_t>(ch) * h + y) * w + x];
        out[(static_cast<std::size_t>(y) * w + x) * c + ch] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
  return out;
}

Image load_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return from_interleaved(buffer.data(), static_cast<int>(image.width), static_cast<int>(image.height), 3);
}

Image load_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6") throw IoError("unsupported netpbm variant in " + path.string());
  auto next_int = [&]() {
    int v = 0;
    while (is >> std::ws && is.peek() == '#') {
      std::string comment;
      std::getline(is, comment);
    }
    if (!(is >> v)) throw IoError("malformed netpbm header in " + path.string());
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported netpbm geometry in " + path.string());
  is.get();
  const int ch = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> data(static_cast<std::size_t>(w) * h * ch);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (static_cast<std::size_t>(is.gcount()) != data.size()) throw IoError("truncated netpbm " + path.string());
  return from_interleaved(data.data(), w, h, ch);
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return load_png(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return load_pnm(path);
  throw IoError("unsupported image format: " + path.string());
}

void save_png(const std::filesystem::path& path, const Image& img) {
  if (img.shape.channels != 3) throw ValidationError("save_png expects 3 channels");
  const auto data = to_interleaved(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.shape.width);
  image.height = static_cast<png_uint_32>(img.shape.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

void save_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.shape.channels != 3) throw ValidationError("save_ppm expects 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os << "P6\n" << img.shape.width << ' ' << img.shape.height << "\n255\n";
  const auto data = to_interleaved(img);
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

std::vector<double> resize_region(std::span<const double> src, ImageShape shape, double x0, double y0, double w,
                                  double h, int out_h, int out_w) {
  std::vector<double> out(static_cast<std::size_t>(shape.channels) * out_h * out_w);
  const double sx = w / out_w, sy = h / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp(y0 + (oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(shape.height - 1));
    const int y_lo = static_cast<int>(std::floor(fy));
    const int y_hi = std::min(y_lo + 1, shape.height - 1);
    const double ty = fy - y_lo;
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp(x0 + (ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(shape.width - 1));
      const int x_lo = static_cast<int>(std::floor(fx));
      const int x_hi = std::min(x_lo + 1, shape.width - 1);
      const double tx = fx - x_lo;
      for (int c = 0; c < shape.channels; ++c) {
        const double* plane = src.data() + static_cast<std::size_t>(c) * shape.pixels();
        const double top = plane[y_lo * shape.width + x_lo] * (1 - tx) + plane[y_lo * shape.width + x_hi] * tx;
        const double bot = plane[y_hi * shape.width + x_lo] * (1 - tx) + plane[y_hi * shape.width + x_hi] * tx;
        out[(static_cast<std::size_t>(c) * out_h + oy) * out_w + ox] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

}  // namespace afa
