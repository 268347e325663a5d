// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "dptq/cli.hpp"

int main(int argc, char** argv) { return dptq::cli::run(argc, argv); }
