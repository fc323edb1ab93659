#include "kinetos/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "kinetos/errors.hpp"
#include "kinetos/rng.hpp"

namespace kinetos {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

}  // namespace kinetos
