// Copyright 2026 The ctta-prune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Umbrella header.

#pragma once

#include "ctta/ablation.hpp"
#include "ctta/adaptation.hpp"
#include "ctta/archive.hpp"
#include "ctta/autodiff.hpp"
#include "ctta/boxes.hpp"
#include "ctta/config.hpp"
#include "ctta/corrupt.hpp"
#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/evaluation.hpp"
#include "ctta/experiment.hpp"
#include "ctta/flops.hpp"
#include "ctta/kernels.hpp"
#include "ctta/metrics_log.hpp"
#include "ctta/network.hpp"
#include "ctta/optim.hpp"
#include "ctta/pretrain.hpp"
#include "ctta/pruning.hpp"
#include "ctta/scene.hpp"
#include "ctta/sensitivity.hpp"
#include "ctta/shrink.hpp"
#include "ctta/source_stats.hpp"
#include "ctta/stream.hpp"
#include "ctta/tensor.hpp"
