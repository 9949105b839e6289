// Copyright 2025 The depflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "depflow/common.hpp"
#include "depflow/matrix.hpp"
#include "depflow/rng.hpp"
#include "depflow/tape.hpp"
#include "depflow/flow.hpp"
#include "depflow/covariance.hpp"
#include "depflow/likelihood.hpp"
#include "depflow/data.hpp"
#include "depflow/training.hpp"
#include "depflow/stats.hpp"
#include "depflow/svgplot.hpp"
#include "depflow/harness.hpp"
