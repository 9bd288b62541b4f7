#pragma once

// Minimal image I/O: binary PPM/PGM and PNG (via libpng), conversion to/from
// [0,1] float tensors, and aligned-corners bilinear resampling.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mltr/error.hpp"
#include "mltr/tensor.hpp"

namespace mltr {

/// 8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB).
struct ImageU8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline int pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, returns the next integer.
  char c;
  while (in.get(c)) {
    if (c == '#') {
      while (in.get(c) && c != '\n') {
      }
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      in.putback(c);
      int v;
      in >> v;
      return v;
    }
  }
  throw DataError("truncated PNM header");
}

}  // namespace detail

inline ImageU8 read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  char magic[2];
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw DataError("not a binary PPM/PGM file: " + path);
  ImageU8 img;
  img.channels = magic[1] == '6' ? 3 : 1;
  img.width = static_cast<std::size_t>(detail::pnm_token(in));
  img.height = static_cast<std::size_t>(detail::pnm_token(in));
  int maxval = detail::pnm_token(in);
  if (maxval <= 0 || maxval > 255) throw DataError("unsupported PNM maxval in " + path);
  in.get();  // single whitespace after header
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw DataError("truncated PNM payload: " + path);
  return img;
}

inline void write_pnm(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("PNM supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

inline ImageU8 read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("failed to decode PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  ImageU8 img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.width * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t r = 0; r < img.height; ++r)
    rows[r] = img.pixels.data() + r * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("PNG writer supports 1 or 3 channels");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write image: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("failed to encode PNG: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t r = 0; r < img.height; ++r)
    rows[r] = const_cast<png_bytep>(img.pixels.data() + r * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Dispatches on the file signature: PNG or binary PPM/PGM.
inline ImageU8 read_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open image: " + path);
  unsigned char sig[8] = {0};
  probe.read(reinterpret_cast<char*>(sig), 8);
  probe.close();
  if (!png_sig_cmp(sig, 0, 8)) return read_png(path);
  if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return read_pnm(path);
  throw DataError("unsupported image format (expect PNG or binary PPM/PGM): " + path);
}

inline void write_image(const std::string& path, const ImageU8& img) {
  if (has_suffix(path, ".png")) return write_png(path, img);
  return write_pnm(path, img);
}

/// [3,H,W] tensor in [0,1] from an 8-bit image (gray replicates channels).
template <class S = double>
TensorT<S> image_to_tensor(const ImageU8& img) {
  TensorT<S> t({3, img.height, img.width});
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t q = 0; q < img.width; ++q)
      for (std::size_t c = 0; c < 3; ++c) {
        std::uint8_t v = img.pixels[(r * img.width + q) * img.channels +
                                    (img.channels == 3 ? c : 0)];
        t.data()[(c * img.height + r) * img.width + q] = S(v) / S(255);
      }
  return t;
}

/// 8-bit image from a [3,H,W] (RGB) or [H,W] (gray) tensor in [0,1].
template <class S>
ImageU8 tensor_to_image(const TensorT<S>& t) {
  ImageU8 img;
  auto quantize = [](S v) {
    double x = double(v) * 255.0 + 0.5;
    return static_cast<std::uint8_t>(x < 0 ? 0 : (x > 255 ? 255 : x));
  };
  if (t.ndim() == 2) {
    img.height = t.shape()[0];
    img.width = t.shape()[1];
    img.channels = 1;
    img.pixels.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) img.pixels[i] = quantize(t.data()[i]);
    return img;
  }
  if (t.ndim() == 3 && t.shape()[0] == 3) {
    img.height = t.shape()[1];
    img.width = t.shape()[2];
    img.channels = 3;
    img.pixels.resize(img.height * img.width * 3);
    for (std::size_t r = 0; r < img.height; ++r)
      for (std::size_t q = 0; q < img.width; ++q)
        for (std::size_t c = 0; c < 3; ++c)
          img.pixels[(r * img.width + q) * 3 + c] =
              quantize(t.data()[(c * img.height + r) * img.width + q]);
    return img;
  }
  throw ShapeError("tensor_to_image expects [3,H,W] or [H,W]");
}

/// Aligned-corners bilinear resampling of [C,H,W]: output corners map exactly
/// onto input corners, so a 2x2 ramp upsampled to 4x4 interpolates linearly
/// from end to end.
template <class S>
TensorT<S> resize_bilinear(const TensorT<S>& x, std::size_t out_h, std::size_t out_w) {
  if (x.ndim() != 3) throw ShapeError("resize_bilinear expects [C,H,W]");
  std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (out_h == 0 || out_w == 0) throw ConfigError("resize to empty extent");
  TensorT<S> out({c, out_h, out_w});
  double sr = out_h > 1 ? double(h - 1) / double(out_h - 1) : 0.0;
  double sq = out_w > 1 ? double(w - 1) / double(out_w - 1) : 0.0;
  for (std::size_t r = 0; r < out_h; ++r) {
    double fr = r * sr;
    std::size_t r0 = static_cast<std::size_t>(fr);
    std::size_t r1 = std::min(r0 + 1, h - 1);
    double ar = fr - r0;
    for (std::size_t q = 0; q < out_w; ++q) {
      double fq = q * sq;
      std::size_t q0 = static_cast<std::size_t>(fq);
      std::size_t q1 = std::min(q0 + 1, w - 1);
      double aq = fq - q0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const S* plane = x.data().data() + ch * h * w;
        double top = double(plane[r0 * w + q0]) * (1 - aq) + double(plane[r0 * w + q1]) * aq;
        double bot = double(plane[r1 * w + q0]) * (1 - aq) + double(plane[r1 * w + q1]) * aq;
        out.data()[(ch * out_h + r) * out_w + q] = S(top * (1 - ar) + bot * ar);
      }
    }
  }
  return out;
}

}  // namespace mltr
