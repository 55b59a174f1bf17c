/* Copyright 2026 The frill Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include "frill/analysis.hpp"
#include "frill/bench.hpp"
#include "frill/distill.hpp"
#include "frill/dsp.hpp"
#include "frill/error.hpp"
#include "frill/eval.hpp"
#include "frill/kernels.hpp"
#include "frill/lowrank.hpp"
#include "frill/model.hpp"
#include "frill/quant.hpp"
#include "frill/serialize.hpp"
#include "frill/tensor.hpp"
