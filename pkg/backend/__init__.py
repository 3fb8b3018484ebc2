# Backend package