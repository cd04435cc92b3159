#pragma once

namespace asmr {

/// Selects between the OpenMP kernel and its serial reference implementation.
enum class Exec { Serial, Parallel };

}  // namespace asmr
