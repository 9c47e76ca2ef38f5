#pragma once

#include "vitlens/class_lens.hpp"
#include "vitlens/container.hpp"
#include "vitlens/error.hpp"
#include "vitlens/forward.hpp"
#include "vitlens/memory_lens.hpp"
#include "vitlens/model.hpp"
#include "vitlens/numdiff.hpp"
#include "vitlens/parallel.hpp"
#include "vitlens/perturb.hpp"
#include "vitlens/probe.hpp"
#include "vitlens/relevance.hpp"
#include "vitlens/report.hpp"
#include "vitlens/tensor.hpp"
