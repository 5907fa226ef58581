"""Synthetic MovieLens-1M-format dataset for desk-scale runs and tests.

Writes users.dat, movies.dat and ratings.dat with the same "::" layout as the
real distribution. Ratings come from latent genre tastes that depend on the
user's age, gender and occupation, so a feature-only model has something to
learn. Activity is long-tailed and each user's ratings arrive in bursts that
form sessions.
"""

import os

import numpy as np
from faker import Faker

from data import MOVIELENS_AGES, MOVIELENS_GENRES, MOVIELENS_OCCUPATIONS

START_TIMESTAMP = 956703932
BURST_GAP = 120
DAY = 86400


def _taste_tables(rng, n_genres):
    return {
        "gender": rng.normal(0, 1.0, size=(2, n_genres)),
        "age": rng.normal(0, 0.8, size=(len(MOVIELENS_AGES), n_genres)),
        "occupation": rng.normal(0, 0.6, size=(MOVIELENS_OCCUPATIONS, n_genres)),
    }


def generate_sample_data(out_dir, n_users=200, n_movies=300, seed=0, mean_ratings=40, min_ratings=6):
    """Write a synthetic dataset into out_dir; returns the (users, movies, ratings) counts."""
    rng = np.random.default_rng(seed)
    fake = Faker("en_IN")
    fake.seed_instance(seed)
    n_genres = len(MOVIELENS_GENRES)
    tastes = _taste_tables(rng, n_genres)
    os.makedirs(out_dir, exist_ok=True)

    # --- movies: 1-3 genres each, popularity skewed ---
    movie_genres = np.zeros((n_movies, n_genres))
    with open(os.path.join(out_dir, "movies.dat"), "w", encoding="latin-1") as f:
        for m in range(n_movies):
            picked = rng.choice(n_genres, size=int(rng.integers(1, 4)), replace=False)
            movie_genres[m, picked] = 1
            title = fake.catch_phrase().replace("::", " ").encode("latin-1", "replace").decode("latin-1")
            year = int(rng.integers(1930, 2001))
            genres = "|".join(MOVIELENS_GENRES[g] for g in sorted(picked))
            f.write(f"{m + 1}::{title} ({year})::{genres}\n")
    popularity = rng.zipf(1.6, size=n_movies).astype(float)
    popularity = np.log1p(popularity)
    quality = rng.normal(0, 0.5, size=n_movies)

    # --- users ---
    users = []
    with open(os.path.join(out_dir, "users.dat"), "w", encoding="latin-1") as f:
        for u in range(n_users):
            gender = int(rng.integers(0, 2))
            age = int(rng.integers(0, len(MOVIELENS_AGES)))
            occupation = int(rng.integers(0, MOVIELENS_OCCUPATIONS))
            zipcode = fake.postcode().replace(" ", "")
            f.write(f"{u + 1}::{'FM'[gender]}::{MOVIELENS_AGES[age]}::{occupation}::{zipcode}\n")
            users.append((gender, age, occupation))

    # --- ratings: bursts of consecutive views separated by days ---
    n_ratings = 0
    with open(os.path.join(out_dir, "ratings.dat"), "w", encoding="latin-1") as f:
        for u, (gender, age, occupation) in enumerate(users):
            taste = tastes["gender"][gender] + tastes["age"][age] + tastes["occupation"][occupation]
            affinity = movie_genres @ taste / movie_genres.sum(axis=1) + quality
            count = int(min(n_movies, max(min_ratings, rng.lognormal(np.log(mean_ratings), 0.8))))
            weights = np.exp(0.8 * affinity + popularity)
            seen = rng.choice(n_movies, size=count, replace=False, p=weights / weights.sum())
            t = START_TIMESTAMP + int(rng.integers(0, 30 * DAY))
            for i, m in enumerate(seen):
                if i and rng.random() < 0.2:
                    t += int(rng.integers(DAY, 5 * DAY))
                else:
                    t += int(rng.integers(10, BURST_GAP))
                score = 3.0 + 1.2 * affinity[m] + rng.normal(0, 0.7)
                rating = int(np.clip(np.rint(score), 1, 5))
                f.write(f"{u + 1}::{m + 1}::{rating}::{t}\n")
                n_ratings += 1
    return n_users, n_movies, n_ratings
