#include "codeunlearn/error.hpp"

namespace cu {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Index: return "index error";
    case ErrorKind::State: return "state error";
    case ErrorKind::Capacity: return "capacity error";
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Length: return "length error";
    case ErrorKind::Training: return "training error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Io: return "io error";
    case ErrorKind::UnknownTopic: return "unknown topic";
    case ErrorKind::MissingBaseline: return "missing baseline";
  }
  return "error";
}

}  // namespace cu
