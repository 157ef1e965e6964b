#pragma once

#include "cohort_forge/cohort.hpp"
#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/featurize.hpp"
#include "cohort_forge/matrix.hpp"
#include "cohort_forge/metrics.hpp"
#include "cohort_forge/parallel.hpp"
#include "cohort_forge/pipeline.hpp"
#include "cohort_forge/predicate.hpp"
#include "cohort_forge/probe.hpp"
#include "cohort_forge/random.hpp"
#include "cohort_forge/standardize.hpp"
#include "cohort_forge/synthgen.hpp"
#include "cohort_forge/task.hpp"
#include "cohort_forge/time.hpp"
