#pragma once

#include <stdexcept>
#include <string>

namespace mpvcrop {

/// Caller violated a documented precondition (bad shape, bad index, bad config).
class usage_error : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// An internal contract was broken (e.g. a pseudo label missing after refresh).
class contract_error : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

} // namespace mpvcrop
