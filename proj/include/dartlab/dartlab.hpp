#pragma once

#include "dartlab/attacks.hpp"
#include "dartlab/autodiff.hpp"
#include "dartlab/common.hpp"
#include "dartlab/data.hpp"
#include "dartlab/divergence.hpp"
#include "dartlab/harness.hpp"
#include "dartlab/models.hpp"
#include "dartlab/tensor.hpp"
#include "dartlab/theory.hpp"
#include "dartlab/trainers.hpp"
