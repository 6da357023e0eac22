#pragma once

#include <stdexcept>
#include <string>

namespace ilora {

// A caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Operand extents do not agree.
class DimensionError : public ContractError {
public:
    using ContractError::ContractError;
};

// A fixed-size resource (sequence length, vocabulary) would overflow.
class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Numerical breakdown detected at runtime (NaN loss, fully masked softmax row).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent configuration / input files.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace ilora
