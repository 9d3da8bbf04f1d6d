#pragma once

#include <stdexcept>
#include <string>

namespace kmmvae {

/// Shape or axis mismatch between operands.
class dimension_error : public std::runtime_error {
public:
    explicit dimension_error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid static configuration (e.g. even conv kernel width).
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

/// Value outside the mathematical domain of an operation, or a
/// non-finite quantity where a finite one is required.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

/// API contract violation (e.g. backward on a consumed tape).
class contract_error : public std::logic_error {
public:
    explicit contract_error(const std::string& what) : std::logic_error(what) {}
};

/// Malformed file content; carries the byte offset of the failure.
class parse_error : public std::runtime_error {
public:
    parse_error(const std::string& what, std::size_t byte_offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}
    std::size_t byte_offset() const { return offset_; }

private:
    std::size_t offset_;
};

/// Input data unusable for the requested computation (all-zero dataset,
/// too few samples, ...).
class data_error : public std::runtime_error {
public:
    explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace kmmvae
