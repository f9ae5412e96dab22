#include "splitckpt/image.hpp"

#include <fmt/format.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "splitckpt/digest.hpp"

namespace splitckpt {

namespace {

constexpr char kMagic[4] = {'M', 'C', 'K', 'P'};
constexpr std::size_t kHeaderCrcOffset = 60;

uint64_t regions_body_size(const CheckpointImage& img) {
  uint64_t n = 4 + kRegionEntryBytes * img.regions.size();
  for (const auto& r : img.regions) {
    if (r.tag == Half::Upper) n += r.payload.size();
  }
  return n;
}

uint64_t calllog_body_size(const CheckpointImage& img) {
  return 4 + kCallLogEntryBytes * img.call_log.size();
}

uint64_t pending_body_size(const CheckpointImage& img) {
  uint64_t n = 4;
  for (const auto& p : img.pending) n += kPendingEntryHeaderBytes + p.payload.size();
  return n;
}

uint64_t fds_body_size(const CheckpointImage& img) { return 4 + kFdEntryBytes * img.fds.size(); }

void validate(const CheckpointImage& img) {
  for (const auto& r : img.regions) {
    if (r.label.size() > kMaxLabelBytes || r.label.find('\0') != std::string::npos) {
      throw std::invalid_argument("region label not representable: " + r.label);
    }
    if (r.tag == Half::Upper && r.payload.size() != r.length) {
      throw std::invalid_argument(fmt::format("upper region '{}' payload is {} bytes, length {}",
                                              r.label, r.payload.size(), r.length));
    }
    if (r.tag == Half::Lower && !r.payload.empty()) {
      throw std::invalid_argument("lower region '" + r.label + "' carries a payload");
    }
  }
  for (const auto& f : img.fds) {
    if (f.description.size() > kFdDescriptionBytes ||
        f.description.find('\0') != std::string::npos) {
      throw std::invalid_argument("fd description not representable");
    }
  }
}

void append_crc(ByteWriter& w, std::size_t body_start) {
  auto span = std::span(w.data()).subspan(body_start);
  w.u32(crc32(span));
}

Half parse_half(uint8_t v) {
  if (v > 1) throw ImageCorrupt(fmt::format("bad half tag {}", v));
  return static_cast<Half>(v);
}

}  // namespace

const char* to_string(ImageSection s) {
  switch (s) {
    case ImageSection::Header: return "header";
    case ImageSection::Regions: return "regions";
    case ImageSection::CallLog: return "calllog";
    case ImageSection::Pending: return "pending";
    case ImageSection::Fds: return "fds";
  }
  return "?";
}

uint64_t CheckpointImage::upper_payload_bytes() const {
  uint64_t n = 0;
  for (const auto& r : regions) {
    if (r.tag == Half::Upper) n += r.payload.size();
  }
  return n;
}

uint64_t serialized_size(const CheckpointImage& img) {
  return kImageHeaderBytes + regions_body_size(img) + calllog_body_size(img) +
         pending_body_size(img) + fds_body_size(img) + 4 * 4;
}

Bytes serialize_image(const CheckpointImage& img) {
  validate(img);
  const uint64_t lens[4] = {regions_body_size(img), calllog_body_size(img),
                            pending_body_size(img), fds_body_size(img)};
  ByteWriter w(static_cast<std::size_t>(serialized_size(img)));

  w.bytes(std::as_bytes(std::span(kMagic)));
  w.u32(kImageVersion);
  w.u32(img.epoch);
  w.u32(img.rank);
  w.u32(img.world_size);
  w.u64(img.uid);
  for (uint64_t len : lens) w.u64(len);
  append_crc(w, 0);

  // regions
  std::size_t start = w.size();
  w.u32(static_cast<uint32_t>(img.regions.size()));
  uint64_t payload_at = start + 4 + kRegionEntryBytes * img.regions.size();
  for (const auto& r : img.regions) {
    w.u64(r.start);
    w.u64(r.length);
    w.u8(static_cast<uint8_t>(r.tag));
    w.fixed_str(r.label, kMaxLabelBytes);
    if (r.tag == Half::Upper) {
      w.u64(payload_at);
      payload_at += r.payload.size();
    } else {
      w.u64(0);
    }
  }
  for (const auto& r : img.regions) {
    if (r.tag == Half::Upper) w.bytes(r.payload);
  }
  append_crc(w, start);

  // call log
  start = w.size();
  w.u32(static_cast<uint32_t>(img.call_log.size()));
  for (const auto& e : img.call_log) {
    w.u64(e.seq);
    w.u8(static_cast<uint8_t>(e.opcode));
    for (uint64_t a : e.args) w.u64(a);
    w.u64(e.result);
  }
  append_crc(w, start);

  // pending messages
  start = w.size();
  w.u32(static_cast<uint32_t>(img.pending.size()));
  for (const auto& p : img.pending) {
    w.u32(p.source);
    w.u32(p.dest);
    w.u32(p.comm);
    w.i32(p.tag);
    w.u64(p.payload.size());
    w.bytes(p.payload);
  }
  append_crc(w, start);

  // fds
  start = w.size();
  w.u32(static_cast<uint32_t>(img.fds.size()));
  for (const auto& f : img.fds) {
    w.u32(f.fd);
    w.u8(static_cast<uint8_t>(f.half));
    w.fixed_str(f.description, kFdDescriptionBytes);
  }
  append_crc(w, start);

  return w.take();
}

CheckpointImage parse_image(std::span<const std::byte> data) {
  if (data.size() < kImageHeaderBytes) {
    throw Truncated(fmt::format("image is {} bytes, header needs {}", data.size(),
                                kImageHeaderBytes));
  }
  if (std::memcmp(data.data(), kMagic, 4) != 0) throw BadMagic("not a checkpoint image (magic)");

  ByteReader h(data.first(kImageHeaderBytes));
  h.bytes(4);
  const uint32_t version = h.u32();
  if (version != kImageVersion) {
    throw VersionMismatch(fmt::format("image version {}, expected {}", version, kImageVersion));
  }
  {
    ByteReader crc_at(data.subspan(kHeaderCrcOffset, 4));
    if (crc_at.u32() != crc32(data.first(kHeaderCrcOffset))) {
      throw CrcMismatch(ImageSection::Header);
    }
  }

  CheckpointImage img;
  img.epoch = h.u32();
  img.rank = h.u32();
  img.world_size = h.u32();
  img.uid = h.u64();
  uint64_t lens[4];
  for (auto& len : lens) len = h.u64();

  // Section extents come from the CRC-protected header, so each body's CRC
  // can be checked before any count inside it is trusted.
  unsigned __int128 expected = kImageHeaderBytes;
  for (uint64_t len : lens) expected += static_cast<unsigned __int128>(len) + 4;
  if (expected > data.size()) {
    throw Truncated(fmt::format("image is {} bytes, header declares more", data.size()));
  }
  if (expected < data.size()) {
    throw ImageCorrupt(fmt::format("{} trailing bytes after fd section",
                                   data.size() - static_cast<std::size_t>(expected)));
  }

  const ImageSection order[4] = {ImageSection::Regions, ImageSection::CallLog,
                                 ImageSection::Pending, ImageSection::Fds};
  std::span<const std::byte> bodies[4];
  std::size_t offsets[4];
  std::size_t at = kImageHeaderBytes;
  for (int i = 0; i < 4; ++i) {
    const auto len = static_cast<std::size_t>(lens[i]);
    bodies[i] = data.subspan(at, len);
    offsets[i] = at;
    ByteReader crc_at(data.subspan(at + len, 4));
    if (crc_at.u32() != crc32(bodies[i])) throw CrcMismatch(order[i]);
    at += len + 4;
  }

  auto finish = [](ByteReader& r, ImageSection s) {
    if (!r.done()) {
      throw ImageCorrupt(fmt::format("{} trailing bytes in section {}", r.remaining(), to_string(s)));
    }
  };

  {
    ByteReader r(bodies[0]);
    const uint32_t n = r.u32();
    if (uint64_t{n} * kRegionEntryBytes > r.remaining()) throw Truncated("region table");
    std::vector<uint64_t> payload_offsets;
    for (uint32_t i = 0; i < n; ++i) {
      ImageRegion reg;
      reg.start = r.u64();
      reg.length = r.u64();
      reg.tag = parse_half(r.u8());
      reg.label = r.fixed_str(kMaxLabelBytes);
      payload_offsets.push_back(r.u64());
      img.regions.push_back(std::move(reg));
    }
    uint64_t expect_at = offsets[0] + r.position();
    for (std::size_t i = 0; i < img.regions.size(); ++i) {
      auto& reg = img.regions[i];
      if (reg.tag == Half::Lower) {
        if (payload_offsets[i] != 0) throw ImageCorrupt("lower region with payload offset");
        continue;
      }
      if (payload_offsets[i] != expect_at) {
        throw ImageCorrupt(fmt::format("region '{}' payload offset {} expected {}", reg.label,
                                       payload_offsets[i], expect_at));
      }
      if (reg.length > r.remaining()) throw Truncated("region payload");
      auto b = r.bytes(static_cast<std::size_t>(reg.length));
      reg.payload.assign(b.begin(), b.end());
      expect_at += reg.length;
    }
    finish(r, ImageSection::Regions);
  }

  {
    ByteReader r(bodies[1]);
    const uint32_t n = r.u32();
    if (uint64_t{n} * kCallLogEntryBytes > r.remaining()) throw Truncated("call log");
    for (uint32_t i = 0; i < n; ++i) {
      CallLogEntry e;
      e.seq = r.u64();
      const uint8_t op = r.u8();
      if (op > static_cast<uint8_t>(Opcode::Finalize)) {
        throw ImageCorrupt(fmt::format("bad opcode {}", op));
      }
      e.opcode = static_cast<Opcode>(op);
      for (auto& a : e.args) a = r.u64();
      e.result = r.u64();
      if (!img.call_log.empty() && e.seq <= img.call_log.back().seq) {
        throw ImageCorrupt(fmt::format("call log seq {} after {}", e.seq, img.call_log.back().seq));
      }
      img.call_log.push_back(e);
    }
    finish(r, ImageSection::CallLog);
  }

  {
    ByteReader r(bodies[2]);
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      PendingMessage p;
      p.source = r.u32();
      p.dest = r.u32();
      p.comm = r.u32();
      p.tag = r.i32();
      const uint64_t len = r.u64();
      if (len > r.remaining()) throw Truncated("pending payload");
      auto b = r.bytes(static_cast<std::size_t>(len));
      p.payload.assign(b.begin(), b.end());
      img.pending.push_back(std::move(p));
    }
    finish(r, ImageSection::Pending);
  }

  {
    ByteReader r(bodies[3]);
    const uint32_t n = r.u32();
    if (uint64_t{n} * kFdEntryBytes > r.remaining()) throw Truncated("fd table");
    for (uint32_t i = 0; i < n; ++i) {
      ImageFd f;
      f.fd = r.u32();
      f.half = parse_half(r.u8());
      f.description = r.fixed_str(kFdDescriptionBytes);
      img.fds.push_back(std::move(f));
    }
    finish(r, ImageSection::Fds);
  }
  return img;
}

std::string dump_regions(const CheckpointImage& img) {
  std::string out;
  for (const auto& r : img.regions) {
    out += fmt::format("{:016x} {:016x} {} {}\n", r.start, r.length, to_string(r.tag), r.label);
  }
  return out;
}

std::string image_filename(uint32_t rank, uint32_t epoch) {
  return fmt::format("ckpt_rank{}_ep{}.img", rank, epoch);
}

CheckpointImage read_image_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("cannot read image " + path.string());
  return parse_image(std::as_bytes(std::span(raw)));
}

}  // namespace splitckpt
