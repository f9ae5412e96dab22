#include "splitckpt/manifest.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>

#include "splitckpt/errors.hpp"

namespace splitckpt {

namespace fs = std::filesystem;

namespace {

uint32_t parse_u32(std::string_view s, std::string_view line) {
  uint64_t v = 0;
  if (s.empty() || s.size() > 10) throw MalformedLine(fmt::format("bad number in '{}'", line));
  for (char c : s) {
    if (c < '0' || c > '9') throw MalformedLine(fmt::format("bad number in '{}'", line));
    v = v * 10 + static_cast<uint64_t>(c - '0');
  }
  if (v > UINT32_MAX) throw MalformedLine(fmt::format("number out of range in '{}'", line));
  return static_cast<uint32_t>(v);
}

std::string_view expect_prefix(std::string_view token, std::string_view prefix,
                               std::string_view line) {
  if (!token.starts_with(prefix)) {
    throw MalformedLine(fmt::format("expected '{}' in '{}'", prefix, line));
  }
  return token.substr(prefix.size());
}

}  // namespace

std::string format_manifest(const Manifest& m) {
  std::string out = fmt::format("MANIFEST v1 epoch={} world={}\n", m.epoch, m.world_size);
  for (const auto& [rank, path] : m.entries) out += fmt::format("rank {} {}\n", rank, path.string());
  return out;
}

Manifest parse_manifest(std::string_view text) {
  Manifest m;
  std::size_t pos = 0;
  bool header = false;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    if (!header) {
      std::istringstream in{std::string(line)};
      std::string magic, version, epoch, world, extra;
      in >> magic >> version >> epoch >> world;
      if (magic != "MANIFEST" || version != "v1" || (in >> extra)) {
        throw MalformedLine(fmt::format("bad manifest header '{}'", line));
      }
      m.epoch = parse_u32(expect_prefix(epoch, "epoch=", line), line);
      m.world_size = parse_u32(expect_prefix(world, "world=", line), line);
      if (m.world_size == 0) throw MalformedLine("manifest world size is 0");
      header = true;
      continue;
    }
    if (!line.starts_with("rank ")) throw MalformedLine(fmt::format("unexpected line '{}'", line));
    auto rest = line.substr(5);
    const auto sp = rest.find(' ');
    if (sp == std::string_view::npos || sp + 1 >= rest.size()) {
      throw MalformedLine(fmt::format("rank line without path '{}'", line));
    }
    const uint32_t rank = parse_u32(rest.substr(0, sp), line);
    const fs::path path(std::string(rest.substr(sp + 1)));
    if (!path.is_absolute()) throw MalformedLine(fmt::format("path is not absolute in '{}'", line));
    if (rank >= m.world_size) {
      throw MalformedLine(fmt::format("rank {} outside world of {}", rank, m.world_size));
    }
    if (!m.entries.emplace(rank, path).second) throw DuplicateRank(rank);
  }
  if (!header) throw MalformedLine("empty manifest");
  for (uint32_t r = 0; r < m.world_size; ++r) {
    if (!m.entries.contains(r)) throw MissingRank(r);
  }
  return m;
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

void write_manifest(const fs::path& path, const Manifest& m) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << format_manifest(m);
    out.flush();
    if (!out) throw IoError("cannot write manifest " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot publish manifest " + path.string());
  }
}

std::string manifest_filename(uint32_t epoch) { return fmt::format("manifest_ep{}.txt", epoch); }

}  // namespace splitckpt
