#include "mlr/checkpoint.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "binary_io.h"

namespace mlr {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint64_t kMaxTextLen = 1 << 20;
constexpr std::uint64_t kMaxTokenLen = 1 << 16;

// FNV-1a, 64 bit.
std::uint64_t checksum(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string encode_payload(const TrainedModel& model) {
  std::ostringstream out(std::ios::binary);
  binary::write_string(out, model.config.serialize());
  const auto& tokens = model.vocab.tokens();
  binary::write_u64(out, tokens.size());
  for (const auto& t : tokens) binary::write_string(out, t);
  model.params.write(out);
  return out.str();
}

TrainedModel decode_payload(const std::string& payload) {
  std::istringstream in(payload, std::ios::binary);
  TrainedModel model;
  model.config = TrainConfig::parse(binary::read_string(in, kMaxTextLen));

  const auto count = binary::read_u64(in);
  if (count < Vocab::kNumReserved || count > payload.size()) {
    throw CheckpointError("corrupt checkpoint: bad vocabulary size");
  }
  std::vector<std::string> tokens;
  for (std::uint64_t i = 0; i < count; ++i) {
    tokens.push_back(binary::read_string(in, kMaxTokenLen));
  }
  const Vocab reserved;
  if (!std::equal(reserved.tokens().begin(), reserved.tokens().end(),
                  tokens.begin())) {
    throw CheckpointError("corrupt checkpoint: reserved tokens out of place");
  }
  model.vocab = Vocab(std::span<const std::string>(tokens).subspan(Vocab::kNumReserved));

  model.params = ParamStore<float>::read(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("corrupt checkpoint: trailing bytes");
  }
  const auto expected = init_params<float>(model.model_config(), 0);
  try {
    expected.check_same_layout(model.params);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint does not match its config: ") +
                          e.what());
  }
  return model;
}

}  // namespace

void write_checkpoint(std::ostream& out, const TrainedModel& model) {
  const std::string payload = encode_payload(model);
  out.write(kMagic, sizeof(kMagic));
  binary::write_u64(out, kCheckpointVersion);
  binary::write_u64(out, payload.size());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  binary::write_u64(out, checksum(payload));
}

TrainedModel read_checkpoint(std::istream& in) {
  try {
    char magic[sizeof(kMagic)];
    if (!in.read(magic, sizeof(magic)) ||
        !std::equal(magic, magic + sizeof(magic), kMagic)) {
      throw CheckpointError("not a checkpoint file (bad magic)");
    }
    const auto version = binary::read_u64(in);
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) +
                            " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    const auto size = binary::read_u64(in);
    std::string payload;
    payload.resize(std::min<std::uint64_t>(size, 1ULL << 32));
    if (size > payload.size() ||
        !in.read(payload.data(), static_cast<std::streamsize>(size))) {
      throw CheckpointError("corrupt checkpoint: truncated");
    }
    const auto stored = binary::read_u64(in);
    if (stored != checksum(payload)) {
      throw CheckpointError("corrupt checkpoint: checksum mismatch");
    }
    return decode_payload(payload);
  } catch (const binary::FormatError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const std::length_error&) {
    throw CheckpointError("corrupt checkpoint: bad length");
  }
}

void save_checkpoint(const TrainedModel& model, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    write_checkpoint(out, model);
    out.flush();
    if (!out) throw std::runtime_error("error writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  auto model = read_checkpoint(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("corrupt checkpoint " + path + ": trailing bytes");
  }
  return model;
}

}  // namespace mlr
