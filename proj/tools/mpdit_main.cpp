// SPDX-License-Identifier: Apache-2.0

#include "mpdit/cli.hpp"

int main(int argc, char** argv) {
    return mpdit::cli_dispatch(argc, argv);
}
