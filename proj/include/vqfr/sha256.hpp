#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace vqfr {

// Minimal SHA-256 (FIPS 180-4), used for golden fixtures and manifest hashes.
class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    // Finalizes and returns lowercase hex digest. The object is consumed.
    std::string hex_digest();

    static std::string hex(const void* data, size_t len);
    static std::string hex(const std::vector<uint8_t>& bytes);
    static std::string hex_of_file(const std::string& path);

private:
    void process_block(const uint8_t* block);

    uint32_t h_[8];
    uint64_t total_len_ = 0;
    uint8_t buf_[64];
    size_t buf_len_ = 0;
};

}  // namespace vqfr
