#include "latte/image_io.hpp"

#include <png.h>
// jpeglib.h needs size_t / FILE declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "latte/error.hpp"

namespace latte {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> interleave(const Image& image) {
  std::vector<std::uint8_t> out(static_cast<size_t>(image.pixels() * image.channels));
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c) {
        out[(static_cast<size_t>(y) * image.width + x) * image.channels + c] = to_byte(image.at(c, y, x));
      }
  return out;
}

Image deinterleave(const std::uint8_t* data, int channels, int height, int width) {
  Image img(channels, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) {
        img.at(c, y, x) = data[(static_cast<size_t>(y) * width + x) * channels + c] / 255.0;
      }
  return img;
}

// ---- PNG -------------------------------------------------------------------

struct PngReadState {
  std::span<const std::uint8_t> bytes;
  size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t len) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->offset + len > st->bytes.size()) png_error(png, "truncated PNG");
  std::memcpy(out, st->bytes.data() + st->offset, len);
  st->offset += len;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void png_flush_noop(png_structp) {}

void png_error_throw(png_structp png, png_const_charp msg) {
  auto* message = static_cast<std::string*>(png_get_error_ptr(png));
  if (message != nullptr) *message = msg;
  png_longjmp(png, 1);
}

void png_warning_ignore(png_structp, png_const_charp) {}

struct RasterOut {
  std::vector<std::uint8_t> pixels;
  int width = 0;
  int height = 0;
  int channels = 0;
  std::string message;
};

// setjmp frames below hold only trivially destructible locals; the C++
// objects they fill live in the caller.
bool decode_png_raw(PngReadState* state, RasterOut* out, std::vector<png_bytep>* rows) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &out->message, png_error_throw, png_warning_ignore);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, state, png_read_from_span);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out->width = static_cast<int>(png_get_image_width(png, info));
  out->height = static_cast<int>(png_get_image_height(png, info));
  out->channels = png_get_channels(png, info);
  out->pixels.resize(static_cast<size_t>(out->width) * out->height * out->channels);
  rows->resize(static_cast<size_t>(out->height));
  for (int y = 0; y < out->height; ++y) {
    (*rows)[static_cast<size_t>(y)] = out->pixels.data() + static_cast<size_t>(y) * out->width * out->channels;
  }
  png_read_image(png, rows->data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  PngReadState state{bytes, 0};
  RasterOut raster;
  std::vector<png_bytep> rows;
  if (!decode_png_raw(&state, &raster, &rows)) throw IoError("PNG decode failed: " + raster.message);
  return deinterleave(raster.pixels.data(), raster.channels, raster.height, raster.width);
}

// ---- JPEG ------------------------------------------------------------------

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

void jpeg_silence(j_common_ptr, int) {}

bool has_prefix(std::span<const std::uint8_t> b, std::initializer_list<std::uint8_t> p) {
  if (b.size() < p.size()) return false;
  return std::equal(p.begin(), p.end(), b.begin());
}

Image decode_pnm(std::span<const std::uint8_t> bytes) {
  const int channels = bytes[1] == '6' ? 3 : 1;
  size_t pos = 2;
  auto next_int = [&]() -> int {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    int v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw IoError("malformed PNM header");
    return v;
  };
  const int width = next_int();
  const int height = next_int();
  const int maxval = next_int();
  ++pos;  // single whitespace before raster
  if (maxval != 255) throw IoError("only 8-bit PNM is supported");
  const size_t need = static_cast<size_t>(width) * height * channels;
  if (pos + need > bytes.size()) throw IoError("truncated PNM raster");
  return deinterleave(bytes.data() + pos, channels, height, width);
}

}  // namespace

namespace {

bool encode_png_raw(const Image* image, const std::vector<png_const_bytep>* rows, std::vector<std::uint8_t>* out,
                    std::string* message) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, message, png_error_throw, png_warning_ignore);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image->width), static_cast<png_uint_32>(image->height), 8,
               image->channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_rows(png, const_cast<png_bytepp>(rows->data()), static_cast<png_uint_32>(rows->size()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

bool encode_jpeg_raw(const Image* image, const std::vector<std::uint8_t>* pixels, int quality,
                     std::vector<std::uint8_t>* out, JpegError* err) {
  jpeg_compress_struct cinfo{};
  cinfo.err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_error_exit;
  err->mgr.emit_message = jpeg_silence;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err->jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(image->width);
  cinfo.image_height = static_cast<JDIMENSION>(image->height);
  cinfo.input_components = image->channels;
  cinfo.in_color_space = image->channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  cinfo.dct_method = JDCT_ISLOW;
  cinfo.optimize_coding = FALSE;
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(pixels->data() +
                                     static_cast<size_t>(cinfo.next_scanline) * image->width * image->channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  out->assign(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return true;
}

bool decode_jpeg_raw(std::span<const std::uint8_t> bytes, RasterOut* out, JpegError* err) {
  jpeg_decompress_struct cinfo{};
  cinfo.err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_error_exit;
  err->mgr.emit_message = jpeg_silence;
  if (setjmp(err->jump)) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.dct_method = JDCT_ISLOW;
  if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out->width = static_cast<int>(cinfo.output_width);
  out->height = static_cast<int>(cinfo.output_height);
  out->channels = cinfo.output_components;
  out->pixels.resize(static_cast<size_t>(out->width) * out->height * out->channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out->pixels.data() + static_cast<size_t>(cinfo.output_scanline) * out->width * out->channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw InvalidArgument("PNG output needs 1 or 3 channels");
  const std::vector<std::uint8_t> pixels = interleave(image);
  std::vector<png_const_bytep> rows(static_cast<size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * image.width * image.channels;
  }
  std::vector<std::uint8_t> out;
  std::string message;
  if (!encode_png_raw(&image, &rows, &out, &message)) throw IoError("PNG encode failed: " + message);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality) {
  if (image.channels != 1 && image.channels != 3) throw InvalidArgument("JPEG needs 1 or 3 channels");
  if (quality < 1 || quality > 100) throw InvalidArgument("JPEG quality outside [1, 100]");
  const std::vector<std::uint8_t> pixels = interleave(image);
  std::vector<std::uint8_t> out;
  JpegError err{};
  if (!encode_jpeg_raw(&image, &pixels, quality, &out, &err)) {
    throw IoError(std::string("JPEG encode failed: ") + err.message);
  }
  return out;
}

Image decode_jpeg(std::span<const std::uint8_t> bytes) {
  RasterOut raster;
  JpegError err{};
  if (!decode_jpeg_raw(bytes, &raster, &err)) throw IoError(std::string("JPEG decode failed: ") + err.message);
  return deinterleave(raster.pixels.data(), raster.channels, raster.height, raster.width);
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  if (has_prefix(bytes, {0x89, 'P', 'N', 'G'})) return decode_png(bytes);
  if (has_prefix(bytes, {0xFF, 0xD8})) return decode_jpeg(bytes);
  if (bytes.size() > 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return decode_pnm(bytes);
  throw IoError("unrecognized image format");
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Image quantize8(const Image& image) {
  Image out = image;
  out.data = (image.data.cwiseMax(0.0).cwiseMin(1.0) * 255.0).round() / 255.0;
  return out;
}

}  // namespace latte
