// SPDX-License-Identifier: Apache-2.0
//
// Subcommand dispatch for the measurement CLI: train, sample, probe, ema-fit.

#pragma once

namespace mpdit {

// Returns the process exit status: 0 on success, nonzero on any failure,
// with diagnostics on stderr.
int cli_dispatch(int argc, const char* const* argv);

} // namespace mpdit
