#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>

#include "subalign/binary_io.hpp"
#include "subalign/errors.hpp"

namespace subalign::cli {

inline std::string sha256_hex(const io::Bytes& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) {
    throw Error("sha256: digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

inline std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(io::read_file(path)); }

}  // namespace subalign::cli
