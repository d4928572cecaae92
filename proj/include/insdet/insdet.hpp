#pragma once

#include "insdet/augment.hpp"
#include "insdet/core.hpp"
#include "insdet/evaluator.hpp"
#include "insdet/matcher.hpp"
#include "insdet/store.hpp"
#include "insdet/synthgen.hpp"
#include "insdet/trainer.hpp"
