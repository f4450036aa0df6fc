#pragma once

#include <stdexcept>
#include <string>

namespace detlens {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (manifest, ODGT, config). Message carries the line when known.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A detector backend replied with something that violates the wire protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Transport-level failure (timeout, connection refused). Safe to retry.
class TransportError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

}  // namespace detlens
